"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array (float32 or float64) and an
optional handle onto a ``Tape``.  While a tape is active, every primitive
records itself together with a closure computing vector-Jacobian products,
and ``Tape.backward`` replays the records in reverse to accumulate
gradients on the leaves.

Conventions that tests rely on:

* mixed-precision inputs promote to float64, never the other way round;
* the conv2d forward accumulates products in a fixed (channel, row, col)
  order, so it is bit-for-bit reproducible and agrees with a naive loop;
* re-running any forward with identical inputs is bitwise deterministic.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import NumericsError, ShapeError, UsageError

Axis = int | tuple[int, ...] | None

_state = threading.local()

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle per-op finiteness assertions (off by default)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def _tape_stack() -> list["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense n-d array of reals, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, dtype=None, requires_grad: bool = False,
                 name: str | None = None):
        keep = isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64)
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not keep:
            arr = arr.astype(np.float32, copy=False)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, cotangent: np.ndarray | None = None) -> dict["Tensor", np.ndarray]:
        if self.tape is None:
            raise UsageError("tensor was not produced on any tape")
        return self.tape.backward(self, cotangent)

    def __repr__(self) -> str:
        head = f"Tensor(shape={self.shape}, dtype={self.data.dtype}"
        if self.name:
            head += f", name={self.name!r}"
        return head + ")"

    # arithmetic sugar; all routed through the recorded primitives
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def constant(data, dtype=None) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data, dtype=dtype, requires_grad=False)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output cotangent to one cotangent per input (None where unused)
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive applications for one forward pass.

    Entries are appended in execution order, which is automatically a
    topological order, and the backward pass visits each entry exactly
    once in reverse.  A tape is single-threaded; concurrent forwards must
    use disjoint tapes.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
               backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> None:
        output.tape = self
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, seed: Tensor,
                 cotangent: np.ndarray | None = None) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of ``seed`` onto every requires-grad leaf.

        ``seed`` must be scalar unless an explicit ``cotangent`` of the
        seed's shape is supplied.  Returns the leaf gradients and also
        adds them into each leaf's ``.grad``.
        """
        produced = {id(e.output) for e in self.entries}
        if id(seed) not in produced and not (seed.requires_grad and seed.tape is None):
            raise UsageError("backward seed is not on this tape")
        if cotangent is None:
            if seed.data.size != 1:
                raise UsageError(
                    f"seed of shape {seed.shape} needs an explicit cotangent")
            cotangent = np.ones_like(seed.data)
        else:
            cotangent = np.asarray(cotangent, dtype=seed.data.dtype)
            if cotangent.shape != seed.data.shape:
                raise ShapeError(
                    f"cotangent shape {cotangent.shape} != seed shape {seed.data.shape}")

        # cotangent per tensor id; removed as soon as an entry is consumed
        acc: dict[int, np.ndarray] = {id(seed): cotangent}
        grads: dict[Tensor, np.ndarray] = {}

        def _is_leaf(t: Tensor) -> bool:
            return t.requires_grad and id(t) not in produced

        if _is_leaf(seed):
            grads[seed] = cotangent

        for entry in reversed(self.entries):
            cot = acc.pop(id(entry.output), None)
            if cot is None:
                continue
            for t, g in zip(entry.inputs, entry.backward(cot)):
                if g is None:
                    continue
                key = id(t)
                if key in acc:
                    acc[key] = acc[key] + g
                else:
                    acc[key] = g
                if _is_leaf(t):
                    grads[t] = acc[key]

        for t, g in grads.items():
            g = np.asarray(g, dtype=t.data.dtype)
            grads[t] = g
            t.grad = g.copy() if t.grad is None else t.grad + g
        return grads


def _result_dtype(*tensors: Tensor):
    return np.result_type(*(t.data.dtype for t in tensors))


def _finite_or_raise(op: str, arr: np.ndarray) -> None:
    if _debug_checks and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values produced by {op}")


def _apply(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]) -> Tensor:
    _finite_or_raise(op, out_data)
    out = Tensor(out_data, dtype=out_data.dtype)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(op, tuple(inputs), out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(cot):
        return (_unbroadcast(cot, a.shape) if a.requires_grad else None,
                _unbroadcast(cot, b.shape) if b.requires_grad else None)

    return _apply("add", (a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(cot):
        return (_unbroadcast(cot, a.shape) if a.requires_grad else None,
                _unbroadcast(-cot, b.shape) if b.requires_grad else None)

    return _apply("sub", (a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(cot):
        return (_unbroadcast(cot * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(cot * a.data, b.shape) if b.requires_grad else None)

    return _apply("mul", (a, b), out, bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def bwd(cot):
        da = _unbroadcast(cot / b.data, a.shape) if a.requires_grad else None
        db = (_unbroadcast(-cot * out / b.data, b.shape)
              if b.requires_grad else None)
        return (da, db)

    return _apply("div", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return _apply("neg", (a,), -a.data,
                  lambda cot: (-cot if a.requires_grad else None,))


def silu(a: Tensor) -> Tensor:
    """Smooth ramp x * sigmoid(x); differentiable everywhere."""
    # exp overflows for inputs below about -745; 1/(1+inf) saturates to
    # the correct limit 0.0, so only the warning needs silencing.
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def bwd(cot):
        return (cot * (s * (1.0 + a.data * (1.0 - s))),)

    return _apply("silu", (a,), out, bwd)


def sin(a: Tensor) -> Tensor:
    return _apply("sin", (a,), np.sin(a.data),
                  lambda cot: (cot * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return _apply("cos", (a,), np.cos(a.data),
                  lambda cot: (-cot * np.sin(a.data),))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _apply("reshape", (a,), out,
                  lambda cot: (cot.reshape(a.shape),))


def transpose2(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose2 needs rank >= 2, got shape {a.shape}")
    out = np.swapaxes(a.data, -1, -2)
    return _apply("transpose2", (a,), out,
                  lambda cot: (np.swapaxes(cot, -1, -2),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2)
    return _apply("swapaxes", (a,), out,
                  lambda cot: (np.swapaxes(cot, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise UsageError("concat of zero tensors")
    out = np.concatenate([t.data for t in ts], axis=axis)
    extents = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(extents)[:-1]

    def bwd(cot):
        pieces = np.split(cot, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(pieces, ts))

    return _apply("concat", ts, out, bwd)


def take_rows(table: Tensor, indices) -> Tensor:
    """Row lookup ``table[indices]``; gradients scatter-add into the table."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise UsageError("take_rows indices must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise UsageError(
            f"row index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bwd(cot):
        g = np.zeros_like(table.data)
        np.add.at(g, idx, cot)
        return (g,)

    return _apply("take_rows", (table,), out, bwd)


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axis: Axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(cot):
        g = cot
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", (a,), out, bwd)


def tmean(a: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(cot):
        g = cot / count
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("mean", (a,), out, bwd)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(cot):
        da = db = None
        if a.requires_grad:
            da = _unbroadcast(np.matmul(cot, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            db = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), cot), b.shape)
        return (da, db)

    return _apply("matmul", (a, b), out, bwd)


# ---------------------------------------------------------------------------
# normalizations


def softmax(a: Tensor, axis: int) -> Tensor:
    """Max-shifted softmax along ``axis``; each slice sums to one."""
    if axis >= a.ndim or axis < -a.ndim:
        raise UsageError(f"softmax axis {axis} out of range for rank {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(cot):
        inner = (cot * y).sum(axis=axis, keepdims=True)
        return (y * (cot - inner),)

    return _apply("softmax", (a,), y, bwd)


def log_softmax(a: Tensor, axis: int) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def bwd(cot):
        return (cot - np.exp(y) * cot.sum(axis=axis, keepdims=True),)

    return _apply("log_softmax", (a,), y, bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize the last axis, then scale and shift per channel."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def bwd(cot):
        dx = dg = db = None
        if gain.requires_grad:
            dg = _unbroadcast(cot * xhat, gain.shape)
        if bias.requires_grad:
            db = _unbroadcast(cot, bias.shape)
        if x.requires_grad:
            dxh = cot * gain.data
            dx = inv_std * (dxh
                            - dxh.mean(axis=-1, keepdims=True)
                            - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return (dx, dg, db)

    return _apply("layer_norm", (x, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# image operations


def _as_batched(t: Tensor, what: str) -> tuple[np.ndarray, bool]:
    if t.ndim == 3:
        return t.data[None], True
    if t.ndim == 4:
        return t.data, False
    raise ShapeError(f"{what} expects a [C,H,W] or [B,C,H,W] tensor, got {t.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with a square odd kernel, no bias.

    In double precision the forward accumulates the C_in*k*k products
    for every output pixel in a fixed (channel, kernel-row, kernel-col)
    order, bitwise equal to a naive scalar loop; that is the reference
    path gradient checks run against.  Single precision contracts via
    BLAS instead (identical bits on reruns, but blocked summation).
    """
    xb, squeeze = _as_batched(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[-1] != kernel.shape[-2]:
        raise ShapeError(f"kernel must be [C_out,C_in,k,k], got {kernel.shape}")
    cout, cin, k, _ = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel extent must be odd, got {k}")
    if stride < 1 or pad < 0:
        raise UsageError(f"invalid stride {stride} or pad {pad}")
    b, cx, h, w = xb.shape
    if cx != cin:
        raise ShapeError(f"input channels {cx} != kernel channels {cin} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"kernel {kernel.shape} larger than padded input "
                         f"{(cx, hp, wp)}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    kd = kernel.data
    out_dtype = np.result_type(xb.dtype, kd.dtype)
    if out_dtype == np.float64:
        out = np.zeros((b, cout, ho, wo), dtype=out_dtype)
        for ci in range(cin):
            for u in range(k):
                for v in range(k):
                    sl = xp[:, ci, u:u + ho * stride:stride,
                            v:v + wo * stride:stride]
                    out += sl[:, None] * kd[:, ci, u, v][None, :, None, None]
    else:
        windows = np.lib.stride_tricks.sliding_window_view(
            xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(windows, kd, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(np.moveaxis(out, 3, 1))

    def bwd(cot):
        cot4 = cot if cot.ndim == 4 else cot[None]
        dx = dk = None
        if kernel.requires_grad:
            windows = np.lib.stride_tricks.sliding_window_view(
                xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
            dk = np.tensordot(cot4, windows, axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            contrib = np.tensordot(cot4, kd, axes=([1], [0]))
            dxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u:u + ho * stride:stride, v:v + wo * stride:stride] += \
                        contrib[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pad:pad + h, pad:pad + w]
            if squeeze:
                dx = dx[0]
        return (dx, dk)

    return _apply("conv2d", (x, kernel), out[0] if squeeze else out, bwd)


@lru_cache(maxsize=None)
def _bilinear_matrix(in_size: int, factor: int) -> np.ndarray:
    """Interpolation matrix [factor*in_size, in_size], half-pixel centers,
    borders clamped."""
    out_size = in_size * factor
    mat = np.zeros((out_size, in_size), dtype=np.float64)
    for i in range(out_size):
        src = (i + 0.5) / factor - 0.5
        lo = int(np.floor(src))
        frac = src - lo
        i0 = min(max(lo, 0), in_size - 1)
        i1 = min(max(lo + 1, 0), in_size - 1)
        mat[i, i0] += 1.0 - frac
        mat[i, i1] += frac
    return mat


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by a whole factor (2 or 4)."""
    if factor not in (2, 4):
        raise UsageError(f"upsample factor must be 2 or 4, got {factor}")
    xb, squeeze = _as_batched(x, "upsample_bilinear")
    b, c, h, w = xb.shape
    uh = _bilinear_matrix(h, factor).astype(xb.dtype)
    uw = _bilinear_matrix(w, factor).astype(xb.dtype)
    out = np.einsum("ph,bchw->bcpw", uh, xb, optimize=True)
    out = np.einsum("qw,bcpw->bcpq", uw, out, optimize=True)

    def bwd(cot):
        cot4 = cot if cot.ndim == 4 else cot[None]
        g = np.einsum("qw,bcpq->bcpw", uw, cot4, optimize=True)
        g = np.einsum("ph,bcpw->bchw", uh, g, optimize=True)
        return (g[0] if squeeze else g,)

    return _apply("upsample", (x,), out[0] if squeeze else out, bwd)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_err: float
    mean_rel_err: float


def grad_check(f, params, eps: float = 1e-5,
               floor: float = 1e-12) -> dict[str, GradCheckResult]:
    """Compare reverse-mode gradients of ``f(params)`` with central differences.

    ``f`` must return a scalar ``Tensor``; ``params`` is iterated as
    (name, tensor) pairs, all float64.  The relative error for each
    element is |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor); the floor
    only guards the all-zero case.  Note that central differences carry
    evaluation noise of roughly |f| * 1e-16 / eps no matter how small
    the true gradient is, so ``f`` should be chosen so its gradient
    entries stay comfortably above that scale (for deep composites, a
    small quadratic term in the parameters conditions the probe).
    """
    named: list[tuple[str, Tensor]] = list(params)
    for name, p in named:
        if p.data.dtype != np.float64:
            raise UsageError(f"grad_check requires float64 parameters ({name} "
                             f"is {p.data.dtype})")
        p.grad = None

    with Tape() as tape:
        loss = f(params)
    if loss.data.size != 1:
        raise UsageError(f"grad_check needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericsError("non-finite loss at the evaluation point")
    tape.backward(loss)
    analytic = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for name, p in named}
    for _, p in named:
        p.grad = None

    def probe(name: str) -> float:
        value = f(params)
        v = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.isfinite(v).all():
            raise NumericsError(f"non-finite loss while probing parameter {name}")
        return float(v.reshape(()))

    report: dict[str, GradCheckResult] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = probe(name)
            flat[i] = orig - eps
            down = probe(name)
            flat[i] = orig
            fd[i] = (up - down) / (2.0 * eps)
        ad = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
        rel = np.abs(ad - fd) / denom
        report[name] = GradCheckResult(float(rel.max()), float(rel.mean()))
    return report
