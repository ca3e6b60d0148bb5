"""Transformer layer family built on tied-projection attention.

The building blocks, smallest to largest:

* ``tied_attention``     one projection matrix serves both key and query
                         roles, so self-attention logits are symmetric
* ``single_head_layer``  attention + feed-forward with residuals and
                         per-unit normalization (both optional)
* ``eab``                expansion: N_m independent single-head modes
                         fused per unit by a softmax gate
* ``sab``                squeeze: attention routed through a small
                         trainable codebook, so the two attention
                         matrices are M x N and N x M, never N x N
* ``mha_baseline``       conventional untied multi-head self-attention

All operate on [..., N, C] feature sequences; a leading batch axis is
broadcast through every matmul.
"""

from __future__ import annotations

import math
import threading
import warnings
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError, UsageError
from .params import ParamStore

# ---------------------------------------------------------------------------
# attention-matrix instrumentation

_probe = threading.local()


class AttentionLog:
    """Copies of every score/attention/gate matrix built while recording."""

    def __init__(self):
        self.records: list[tuple[str, np.ndarray]] = []

    def values(self, kind: str) -> list[np.ndarray]:
        return [v for k, v in self.records if k == kind]

    def shapes(self, kind: str) -> list[tuple[int, ...]]:
        return [v.shape for v in self.values(kind)]


@contextmanager
def record_attention():
    """Capture the matrices instantiated by attention calls in this thread."""
    if not hasattr(_probe, "logs"):
        _probe.logs = []
    log = AttentionLog()
    _probe.logs.append(log)
    try:
        yield log
    finally:
        _probe.logs.pop()


def _note(kind: str, arr: np.ndarray) -> None:
    logs = getattr(_probe, "logs", None)
    if logs:
        logs[-1].records.append((kind, arr.copy()))


def _note_stacked(kind: str, arr: np.ndarray) -> None:
    """Record each slice of a mode/head-stacked [..., G, N, M] array."""
    logs = getattr(_probe, "logs", None)
    if logs:
        for i in range(arr.shape[-3]):
            logs[-1].records.append((kind, arr[..., i, :, :].copy()))


# ---------------------------------------------------------------------------
# parameter bundles


@dataclass
class SingleHeadParams:
    w_kq: Tensor          # [C, C], shared by key and query roles
    w_v: Tensor           # [C, C]
    ffn_w1: Tensor        # [C, C_ff]
    ffn_b1: Tensor
    ffn_w2: Tensor        # [C_ff, C]
    ffn_b2: Tensor
    ln1_g: Tensor | None = None
    ln1_b: Tensor | None = None
    ln2_g: Tensor | None = None
    ln2_b: Tensor | None = None
    layernorm: bool = True


@dataclass
class EABParams:
    """Mode weights carry a leading [N_m] axis so all modes run as one
    batched computation instead of a Python loop."""

    w_kq: Tensor          # [N_m, C, C]
    w_v: Tensor           # [N_m, C, C]
    ffn_w1: Tensor        # [N_m, C, C_ff]
    ffn_b1: Tensor        # [N_m, 1, C_ff]
    ffn_w2: Tensor        # [N_m, C_ff, C]
    ffn_b2: Tensor        # [N_m, 1, C]
    gate_w: Tensor        # [N_m, C, 1]
    gate_b: Tensor        # [N_m, 1, 1]
    ln1_g: Tensor | None = None   # [N_m, 1, C]
    ln1_b: Tensor | None = None
    ln2_g: Tensor | None = None
    ln2_b: Tensor | None = None
    layernorm: bool = True

    @property
    def n_modes(self) -> int:
        return self.w_kq.shape[0]


@dataclass
class SABParams:
    codebook: Tensor      # [M, C]
    step1: SingleHeadParams
    step2: EABParams


@dataclass
class MHAParams:
    w_q: Tensor           # [N_h, C, C/N_h]
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor           # [C, C]
    b_o: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_g: Tensor | None = None
    ln1_b: Tensor | None = None
    ln2_g: Tensor | None = None
    ln2_b: Tensor | None = None
    layernorm: bool = True


# ---------------------------------------------------------------------------
# builders


def build_single_head(store: ParamStore, prefix: str, C: int,
                      ffn_mult: int = 2, layernorm: bool = True) -> SingleHeadParams:
    cff = ffn_mult * C
    p = SingleHeadParams(
        w_kq=store.fan_in_uniform(f"{prefix}.w_kq", (C, C), C),
        w_v=store.fan_in_uniform(f"{prefix}.w_v", (C, C), C),
        ffn_w1=store.fan_in_uniform(f"{prefix}.ffn_w1", (C, cff), C),
        ffn_b1=store.fan_in_uniform(f"{prefix}.ffn_b1", (cff,), C),
        ffn_w2=store.fan_in_uniform(f"{prefix}.ffn_w2", (cff, C), cff),
        ffn_b2=store.fan_in_uniform(f"{prefix}.ffn_b2", (C,), cff),
        layernorm=layernorm,
    )
    if layernorm:
        p.ln1_g = store.ones(f"{prefix}.ln1_g", (C,))
        p.ln1_b = store.zeros(f"{prefix}.ln1_b", (C,))
        p.ln2_g = store.ones(f"{prefix}.ln2_g", (C,))
        p.ln2_b = store.zeros(f"{prefix}.ln2_b", (C,))
    return p


def build_eab(store: ParamStore, prefix: str, C: int, n_modes: int,
              ffn_mult: int = 2, layernorm: bool = True) -> EABParams:
    if n_modes < 1:
        raise ConfigError(f"mode count must be >= 1, got {n_modes}")
    cff = ffn_mult * C
    nm = n_modes
    p = EABParams(
        w_kq=store.fan_in_uniform(f"{prefix}.w_kq", (nm, C, C), C),
        w_v=store.fan_in_uniform(f"{prefix}.w_v", (nm, C, C), C),
        ffn_w1=store.fan_in_uniform(f"{prefix}.ffn_w1", (nm, C, cff), C),
        ffn_b1=store.fan_in_uniform(f"{prefix}.ffn_b1", (nm, 1, cff), C),
        ffn_w2=store.fan_in_uniform(f"{prefix}.ffn_w2", (nm, cff, C), cff),
        ffn_b2=store.fan_in_uniform(f"{prefix}.ffn_b2", (nm, 1, C), cff),
        gate_w=store.fan_in_uniform(f"{prefix}.gate_w", (nm, C, 1), C),
        gate_b=store.fan_in_uniform(f"{prefix}.gate_b", (nm, 1, 1), C),
        layernorm=layernorm,
    )
    if layernorm:
        p.ln1_g = store.ones(f"{prefix}.ln1_g", (nm, 1, C))
        p.ln1_b = store.zeros(f"{prefix}.ln1_b", (nm, 1, C))
        p.ln2_g = store.ones(f"{prefix}.ln2_g", (nm, 1, C))
        p.ln2_b = store.zeros(f"{prefix}.ln2_b", (nm, 1, C))
    return p


def build_sab(store: ParamStore, prefix: str, C: int, n_modes: int,
              codebook_size: int, ffn_mult: int = 2,
              layernorm: bool = True) -> SABParams:
    if codebook_size < 1:
        raise ConfigError(f"codebook size must be >= 1, got {codebook_size}")
    return SABParams(
        codebook=store.normal(f"{prefix}.codebook", (codebook_size, C),
                              1.0 / math.sqrt(C)),
        step1=build_single_head(store, f"{prefix}.squeeze", C, ffn_mult, layernorm),
        step2=build_eab(store, f"{prefix}.expand", C, n_modes, ffn_mult, layernorm),
    )


def build_mha(store: ParamStore, prefix: str, C: int, n_heads: int,
              ffn_mult: int = 2, layernorm: bool = True) -> MHAParams:
    if n_heads < 1 or C % n_heads != 0:
        raise ConfigError(
            f"channel count {C} must be divisible by head count {n_heads}")
    hd = C // n_heads
    cff = ffn_mult * C
    p = MHAParams(
        w_q=store.fan_in_uniform(f"{prefix}.w_q", (n_heads, C, hd), C),
        w_k=store.fan_in_uniform(f"{prefix}.w_k", (n_heads, C, hd), C),
        w_v=store.fan_in_uniform(f"{prefix}.w_v", (n_heads, C, hd), C),
        w_o=store.fan_in_uniform(f"{prefix}.w_o", (C, C), C),
        b_o=store.fan_in_uniform(f"{prefix}.b_o", (C,), C),
        ffn_w1=store.fan_in_uniform(f"{prefix}.ffn_w1", (C, cff), C),
        ffn_b1=store.fan_in_uniform(f"{prefix}.ffn_b1", (cff,), C),
        ffn_w2=store.fan_in_uniform(f"{prefix}.ffn_w2", (cff, C), cff),
        ffn_b2=store.fan_in_uniform(f"{prefix}.ffn_b2", (C,), cff),
        layernorm=layernorm,
    )
    if layernorm:
        p.ln1_g = store.ones(f"{prefix}.ln1_g", (C,))
        p.ln1_b = store.zeros(f"{prefix}.ln1_b", (C,))
        p.ln2_g = store.ones(f"{prefix}.ln2_g", (C,))
        p.ln2_b = store.zeros(f"{prefix}.ln2_b", (C,))
    return p


# ---------------------------------------------------------------------------
# forward passes


def _check_width(x: Tensor, C: int, who: str) -> None:
    if x.shape[-1] != C:
        raise ShapeError(f"{who}: feature width {x.shape[-1]} does not match "
                         f"parameter width {C}")


def tied_attention(x_q: Tensor, x_kv: Tensor, p: SingleHeadParams) -> Tensor:
    """Scaled dot-product attention with one shared key/query projection.

    S = (X_q W_kq)(X_kv W_kq)^T / sqrt(C); rows of softmax(S) mix the
    value rows of X_kv.
    """
    C = p.w_kq.shape[0]
    _check_width(x_q, C, "tied_attention queries")
    _check_width(x_kv, C, "tied_attention keys/values")
    q = ad.matmul(x_q, p.w_kq)
    k = ad.matmul(x_kv, p.w_kq)
    v = ad.matmul(x_kv, p.w_v)
    s = ad.matmul(q, ad.transpose2(k)) * (1.0 / math.sqrt(C))
    _note("scores", s.data)
    a = ad.softmax(s, axis=-1)
    _note("attention", a.data)
    return ad.matmul(a, v)


def ffn(x: Tensor, p) -> Tensor:
    """Per-unit two-layer map: affine, smooth ramp, affine."""
    h = ad.silu(ad.matmul(x, p.ffn_w1) + p.ffn_b1)
    return ad.matmul(h, p.ffn_w2) + p.ffn_b2


def single_head_layer(x_q: Tensor, x_kv: Tensor, p: SingleHeadParams) -> Tensor:
    attn = tied_attention(x_q, x_kv, p)
    if not p.layernorm:
        # bare reading: transform the attention output, no residuals
        return ffn(attn, p)
    h = ad.layer_norm(x_q + attn, p.ln1_g, p.ln1_b)
    return ad.layer_norm(h + ffn(h, p), p.ln2_g, p.ln2_b)


def eab(x_q: Tensor, x_kv: Tensor, p: EABParams) -> Tensor:
    """Expanded attention: per-unit softmax-gated blend of N_m modes.

    With one mode the gate is exactly one and the block reduces to
    ``single_head_layer`` bit for bit.
    """
    nm = p.n_modes
    C = p.w_kq.shape[-1]
    _check_width(x_q, C, "eab queries")
    _check_width(x_kv, C, "eab keys/values")
    lead = x_q.shape[:-2]
    nq = x_q.shape[-2]
    xq = ad.reshape(x_q, lead + (1,) + x_q.shape[-2:])
    xkv = ad.reshape(x_kv, lead + (1,) + x_kv.shape[-2:])
    q = ad.matmul(xq, p.w_kq)                       # [..., N_m, N_q, C]
    k = ad.matmul(xkv, p.w_kq)
    v = ad.matmul(xkv, p.w_v)
    s = ad.matmul(q, ad.transpose2(k)) * (1.0 / math.sqrt(C))
    _note_stacked("scores", s.data)
    a = ad.softmax(s, axis=-1)
    _note_stacked("attention", a.data)
    att = ad.matmul(a, v)
    if p.layernorm:
        h = ad.layer_norm(xq + att, p.ln1_g, p.ln1_b)
        y = ad.layer_norm(h + ffn(h, p), p.ln2_g, p.ln2_b)
    else:
        y = ffn(att, p)                             # [..., N_m, N_q, C]
    raw = ad.matmul(y, p.gate_w) + p.gate_b         # [..., N_m, N_q, 1]
    gate = ad.softmax(ad.transpose2(ad.reshape(raw, lead + (nm, nq))),
                      axis=-1)                      # [..., N_q, N_m]
    _note("gate", gate.data)
    gate = _suppress_gate_column(gate, nm)
    gw = ad.reshape(ad.transpose2(gate), lead + (nm, nq, 1))
    return ad.tsum(ad.mul(y, gw), axis=-3)


def _suppress_gate_column(gate: Tensor, nm: int) -> Tensor:
    """Zero one mode's gate column and renormalize (knockout probes)."""
    ko = getattr(_probe, "suppressed_mode", None)
    if ko is None:
        return gate
    if not 0 <= ko < nm:
        raise UsageError(f"mode index {ko} out of range for {nm} modes")
    if nm == 1:
        raise UsageError("cannot suppress the only mode")
    keep = np.ones((nm,), dtype=gate.data.dtype)
    keep[ko] = 0.0
    masked = ad.mul(gate, Tensor(keep))
    return ad.div(masked, ad.tsum(masked, axis=-1, keepdims=True))


@contextmanager
def suppress_mode(index: int):
    """Force one expansion mode's gate to zero inside the context."""
    prev = getattr(_probe, "suppressed_mode", None)
    _probe.suppressed_mode = int(index)
    try:
        yield
    finally:
        _probe.suppressed_mode = prev


def sab(x: Tensor, p: SABParams) -> Tensor:
    """Squeezed attention: input -> codebook -> input, two skinny matrices."""
    m = p.codebook.shape[0]
    n = x.shape[-2]
    if m > n:
        warnings.warn(f"codebook size {m} exceeds unit count {n}; the "
                      f"squeeze step no longer compresses", stacklevel=2)
    compressed = single_head_layer(p.codebook, x, p.step1)
    return eab(x, compressed, p.step2)


def mha_baseline(x: Tensor, p: MHAParams) -> Tensor:
    """Untied multi-head self-attention with the usual concat-project fuse."""
    C = p.w_o.shape[0]
    _check_width(x, C, "mha_baseline")
    hd = p.w_q.shape[-1]
    lead = x.shape[:-2]
    n = x.shape[-2]
    xe = ad.reshape(x, lead + (1, n, C))
    q = ad.matmul(xe, p.w_q)                        # [..., N_h, N, hd]
    k = ad.matmul(xe, p.w_k)
    v = ad.matmul(xe, p.w_v)
    s = ad.matmul(q, ad.transpose2(k)) * (1.0 / math.sqrt(hd))
    _note_stacked("scores", s.data)
    a = ad.softmax(s, axis=-1)
    _note_stacked("attention", a.data)
    av = ad.matmul(a, v)
    cat = ad.reshape(ad.swapaxes(av, -3, -2), lead + (n, C))
    fused = ad.matmul(cat, p.w_o) + p.b_o
    if not p.layernorm:
        return ffn(fused, p)
    h = ad.layer_norm(x + fused, p.ln1_g, p.ln1_b)
    return ad.layer_norm(h + ffn(h, p), p.ln2_g, p.ln2_b)


LayerParams = SABParams | EABParams | MHAParams | SingleHeadParams


def apply_layer(x: Tensor, layer: LayerParams) -> Tensor:
    if isinstance(layer, SABParams):
        return sab(x, layer)
    if isinstance(layer, EABParams):
        return eab(x, x, layer)
    if isinstance(layer, MHAParams):
        return mha_baseline(x, layer)
    if isinstance(layer, SingleHeadParams):
        return single_head_layer(x, x, layer)
    raise UsageError(f"unknown layer parameter type {type(layer).__name__}")


def stack_layers(x: Tensor, layers: list[LayerParams]) -> Tensor:
    """Apply layers in sequence; the unit count must survive every layer."""
    if not layers:
        raise ConfigError("transformer stack is empty")
    n = x.shape[-2]
    for layer in layers:
        x = apply_layer(x, layer)
        if x.shape[-2] != n:
            raise ShapeError(f"layer changed unit count {n} -> {x.shape[-2]}")
    return x
