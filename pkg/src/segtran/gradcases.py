"""Gradient-check cases behind the `gradcheck` command and the op tests.

Each case builds float64 parameters plus any fixed constants, and
returns a scalar-valued function of those parameters.  The scalar is a
randomly weighted sum of the op output so that every output element
influences the loss.  `end_to_end` differentiates a full tiny-width
model through its training loss.
"""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _param(rng, shape, scale=1.0, name="p"):
    return (name, Tensor(rng.standard_normal(shape) * scale,
                         dtype=np.float64, requires_grad=True, name=name))


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(ad.mul(out, ad.constant(w)))


def _case_add(rng):
    params = [_param(rng, (3, 4), name="a"), _param(rng, (4,), name="b")]
    w = rng.standard_normal((3, 4))
    return lambda ps: _weighted(ad.add(ps[0][1], ps[1][1]), w), params


def _case_sub(rng):
    params = [_param(rng, (3, 4), name="a"), _param(rng, (3, 1), name="b")]
    w = rng.standard_normal((3, 4))
    return lambda ps: _weighted(ad.sub(ps[0][1], ps[1][1]), w), params


def _case_mul(rng):
    params = [_param(rng, (2, 3, 4), name="a"), _param(rng, (3, 4), name="b")]
    w = rng.standard_normal((2, 3, 4))
    return lambda ps: _weighted(ad.mul(ps[0][1], ps[1][1]), w), params


def _case_div(rng):
    num = _param(rng, (3, 4), name="num")
    den = ("den", Tensor(0.5 + rng.uniform(0.2, 1.0, (3, 4)),
                         dtype=np.float64, requires_grad=True, name="den"))
    w = rng.standard_normal((3, 4))
    return lambda ps: _weighted(ad.div(ps[0][1], ps[1][1]), w), [num, den]


def _case_neg(rng):
    params = [_param(rng, (5,), name="a")]
    w = rng.standard_normal((5,))
    return lambda ps: _weighted(ad.neg(ps[0][1]), w), params


def _case_silu(rng):
    params = [_param(rng, (4, 3), 2.0, name="a")]
    w = rng.standard_normal((4, 3))
    return lambda ps: _weighted(ad.silu(ps[0][1]), w), params


def _case_sin(rng):
    params = [_param(rng, (6,), 3.0, name="a")]
    w = rng.standard_normal((6,))
    return lambda ps: _weighted(ad.sin(ps[0][1]), w), params


def _case_cos(rng):
    params = [_param(rng, (6,), 3.0, name="a")]
    w = rng.standard_normal((6,))
    return lambda ps: _weighted(ad.cos(ps[0][1]), w), params


def _case_matmul(rng):
    params = [_param(rng, (3, 4), name="a"), _param(rng, (4, 5), name="b")]
    w = rng.standard_normal((3, 5))
    return lambda ps: _weighted(ad.matmul(ps[0][1], ps[1][1]), w), params


def _case_matmul_batched(rng):
    # a batch on the left operand only exercises the unbroadcast path
    params = [_param(rng, (2, 3, 4), name="a"), _param(rng, (4, 5), name="b")]
    w = rng.standard_normal((2, 3, 5))
    return lambda ps: _weighted(ad.matmul(ps[0][1], ps[1][1]), w), params


def _case_transpose2(rng):
    params = [_param(rng, (2, 3, 4), name="a")]
    w = rng.standard_normal((2, 4, 3))
    return lambda ps: _weighted(ad.transpose2(ps[0][1]), w), params


def _case_reshape(rng):
    params = [_param(rng, (3, 4), name="a")]
    w = rng.standard_normal((2, 6))
    return lambda ps: _weighted(ad.reshape(ps[0][1], (2, 6)), w), params


def _case_concat(rng):
    params = [_param(rng, (2, 3), name="a"), _param(rng, (2, 2), name="b"),
              _param(rng, (2, 1), name="c")]
    w = rng.standard_normal((2, 6))
    return (lambda ps: _weighted(ad.concat([p for _, p in ps], axis=1), w),
            params)


def _case_sum(rng):
    params = [_param(rng, (3, 4, 2), name="a")]
    w = rng.standard_normal((3, 2))
    return lambda ps: _weighted(ad.tsum(ps[0][1], axis=1), w), params


def _case_mean(rng):
    params = [_param(rng, (3, 4, 2), name="a")]
    w = rng.standard_normal((3, 1, 2))
    return (lambda ps: _weighted(ad.tmean(ps[0][1], axis=1, keepdims=True), w),
            params)


def _case_softmax(rng):
    params = [_param(rng, (3, 5), 2.0, name="a")]
    w = rng.standard_normal((3, 5))
    return lambda ps: _weighted(ad.softmax(ps[0][1], axis=-1), w), params


def _case_log_softmax(rng):
    params = [_param(rng, (3, 5), 2.0, name="a")]
    w = rng.standard_normal((3, 5))
    return lambda ps: _weighted(ad.log_softmax(ps[0][1], axis=-1), w), params


def _case_layer_norm(rng):
    params = [_param(rng, (2, 3, 6), name="x"),
              ("g", Tensor(1.0 + 0.1 * rng.standard_normal(6), dtype=np.float64,
                           requires_grad=True, name="g")),
              _param(rng, (6,), 0.1, name="b")]
    w = rng.standard_normal((2, 3, 6))
    return (lambda ps: _weighted(ad.layer_norm(ps[0][1], ps[1][1], ps[2][1]), w),
            params)


def _case_conv2d(rng):
    params = [_param(rng, (2, 3, 6, 6), name="x"),
              _param(rng, (4, 3, 3, 3), 0.5, name="k")]
    w = rng.standard_normal((2, 4, 3, 3))
    return (lambda ps: _weighted(ad.conv2d(ps[0][1], ps[1][1], stride=2, pad=1), w),
            params)


def _case_conv2d_unit(rng):
    params = [_param(rng, (3, 4, 4), name="x"),
              _param(rng, (2, 3, 1, 1), name="k")]
    w = rng.standard_normal((2, 4, 4))
    return lambda ps: _weighted(ad.conv2d(ps[0][1], ps[1][1]), w), params


def _case_upsample(rng):
    params = [_param(rng, (1, 2, 3, 3), name="x")]
    w = rng.standard_normal((1, 2, 6, 6))
    return lambda ps: _weighted(ad.upsample_bilinear(ps[0][1], 2), w), params


def _case_take_rows(rng):
    params = [_param(rng, (5, 4), name="table")]
    idx = np.array([0, 2, 2, 4, 1])
    w = rng.standard_normal((5, 4))
    return lambda ps: _weighted(ad.take_rows(ps[0][1], idx), w), params


def _case_swapaxes(rng):
    params = [_param(rng, (2, 3, 4, 5), name="a")]
    w = rng.standard_normal((2, 4, 3, 5))
    return lambda ps: _weighted(ad.swapaxes(ps[0][1], 1, 2), w), params


CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "div": _case_div,
    "neg": _case_neg,
    "silu": _case_silu,
    "sin": _case_sin,
    "cos": _case_cos,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "transpose2": _case_transpose2,
    "swapaxes": _case_swapaxes,
    "reshape": _case_reshape,
    "concat": _case_concat,
    "sum": _case_sum,
    "mean": _case_mean,
    "softmax": _case_softmax,
    "log_softmax": _case_log_softmax,
    "layer_norm": _case_layer_norm,
    "conv2d": _case_conv2d,
    "conv2d_1x1": _case_conv2d_unit,
    "upsample_bilinear": _case_upsample,
    "take_rows": _case_take_rows,
}


def run_case(name: str, seed: int = 0) -> float:
    """Gradient-check one op; returns the worst relative error across params."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    f, params = CASES[name](rng)
    report = ad.grad_check(f, params, eps=1e-5)
    return max(r.max_rel_err for r in report.values())


def end_to_end(seed: int = 0) -> float:
    """Gradient-check the whole pipeline at 32x32 with tiny widths.

    Returns the worst relative error over every trainable tensor in the
    model, including the positional encoding and the codebooks.  The
    probed scalar is the training loss plus a small quadratic in the
    parameters: deep composites always have a few near-zero gradient
    entries, and without the ridge term the difference quotient on those
    entries measures only evaluation noise (about |f| * 1e-16 / eps).
    The extra term has an exact, noise-free derivative everywhere, so it
    conditions the probe without hiding a wrong backward rule.
    """
    from .config import make_config
    from .model import build_model
    from .training import combined_loss

    cfg = make_config(task="rings", image_size=32, channels=(2, 3, 4, 4),
                      layers=1, modes=2, codebook=3, heads=2, pe="learnable",
                      precision="double", iters=0)
    model = build_model(cfg, seed=seed)
    rng = np.random.default_rng([seed, 0xE2E])
    image = ad.constant(rng.uniform(0.0, 1.0, (1, 32, 32)), np.float64)
    mask = rng.integers(0, cfg.classes, (32, 32))
    shift = {name: ad.constant(rng.normal(0.0, 1.0, p.shape), np.float64)
             for name, p in model.store}

    def f(ps):
        loss = combined_loss(model.forward(image), mask)
        for name, p in model.store:
            off = ad.reshape(p, (-1,)) - ad.reshape(shift[name], (-1,))
            loss = loss + ad.tsum(ad.mul(off, off)) * 5e-4
        return loss

    report = ad.grad_check(f, list(model.store), eps=1e-5)
    return max(r.max_rel_err for r in report.values())
