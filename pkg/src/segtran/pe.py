"""Positional encodings for the flattened feature sequence.

Four schemes share one interface: given the transformer-input grid
extents they produce an [H*W, C] encoding in row-major order, ready to
be added to the flattened features.

* ``none``        zero encoding
* ``fixed``       sinusoidal ladder over normalized coordinates, frozen
* ``discrete``    one trainable code row per grid cell, no continuity prior
* ``learnable``   per-channel sin/cos of a trainable affine map of (x, y)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .params import ParamStore

PE_TAGS = ("none", "fixed", "discrete", "learnable")


def normalize_coords(h: int, w: int) -> np.ndarray:
    """Row-major [h*w, 2] array of (x, y) in [0,1]^2.

    Pixel (row r, col c) maps to x = c/(w-1), y = r/(h-1); a degenerate
    extent of 1 pins that coordinate to 0.
    """
    if h < 1 or w < 1:
        raise ConfigError(f"grid extents must be positive, got {h}x{w}")
    xs = np.zeros(w) if w == 1 else np.arange(w) / (w - 1)
    ys = np.zeros(h) if h == 1 else np.arange(h) / (h - 1)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([grid_x.reshape(-1), grid_y.reshape(-1)], axis=1)


@dataclass
class PEWeights:
    a: Tensor  # [C] x-coefficients
    b: Tensor  # [C] y-coefficients
    c: Tensor  # [C] phase offsets


def learnable_sinusoidal_pe(coords: Tensor, w: PEWeights) -> Tensor:
    """pos_i = sin(a_i x + b_i y + c_i) for i < C/2, cos(...) for i >= C/2."""
    C = w.a.shape[0]
    if C % 2 != 0:
        raise ConfigError(f"learnable encoding needs even channel count, got {C}")
    if w.b.shape != (C,) or w.c.shape != (C,):
        raise ConfigError("a, b, c must all have length C")
    x = ad.reshape(coords, (-1, 2)) if coords.ndim != 2 else coords
    dtype = w.a.dtype
    xs = ad.constant(x.data[:, :1].astype(dtype))
    ys = ad.constant(x.data[:, 1:2].astype(dtype))
    arg = ad.add(ad.add(ad.mul(xs, w.a), ad.mul(ys, w.b)), w.c)
    half = np.zeros(C, dtype=dtype)
    half[:C // 2] = 1.0
    lo = ad.constant(half)
    hi = ad.constant(1.0 - half)
    return ad.add(ad.mul(ad.sin(arg), lo), ad.mul(ad.cos(arg), hi))


def fixed_sinusoidal_pe(coords: np.ndarray, C: int,
                        dtype=np.float32) -> Tensor:
    """Frozen sinusoidal encoding; half the channels for x, half for y.

    Within each half, channel pairs (2j, 2j+1) hold sin and cos of the
    coordinate scaled by a geometric frequency ladder running from 1 up
    to 1e4 radians per unit.
    """
    if C % 4 != 0:
        raise ConfigError(f"fixed encoding needs channels divisible by 4, got {C}")
    pairs = C // 4
    if pairs == 1:
        freqs = np.ones(1)
    else:
        freqs = 10000.0 ** (np.arange(pairs) / (pairs - 1))
    out = np.empty((coords.shape[0], C), dtype=np.float64)
    for axis in (0, 1):  # 0: x channels, 1: y channels
        phase = coords[:, axis:axis + 1] * freqs
        base = axis * (C // 2)
        out[:, base + 0:base + C // 2:2] = np.sin(phase)
        out[:, base + 1:base + C // 2:2] = np.cos(phase)
    return ad.constant(out.astype(dtype))


def discrete_learned_pe(grid_index: np.ndarray, table: Tensor) -> Tensor:
    return ad.take_rows(table, grid_index)


class PEScheme:
    """Selected encoding plus its trainable state, if any."""

    def __init__(self, tag: str, C: int, dtype,
                 weights: PEWeights | None = None,
                 table: Tensor | None = None,
                 grid_hw: tuple[int, int] | None = None):
        if tag not in PE_TAGS:
            raise ConfigError(f"unknown pe scheme {tag!r}; choose from {PE_TAGS}")
        self.tag = tag
        self.C = C
        self.dtype = np.dtype(dtype)
        self.weights = weights
        self.table = table
        self.grid_hw = grid_hw

    def encode(self, h: int, w: int) -> Tensor | None:
        """[h*w, C] encoding for the given grid, or None for scheme none."""
        if self.tag == "none":
            return None
        if self.tag == "fixed":
            return fixed_sinusoidal_pe(normalize_coords(h, w), self.C, self.dtype)
        if self.tag == "discrete":
            if (h, w) != self.grid_hw:
                raise ConfigError(
                    f"discrete encoding table was built for grid {self.grid_hw}, "
                    f"got {h}x{w}")
            return discrete_learned_pe(np.arange(h * w), self.table)
        coords = ad.constant(normalize_coords(h, w).astype(self.dtype))
        return learnable_sinusoidal_pe(coords, self.weights)


def build_pe(store: ParamStore, tag: str, C: int,
             grid_hw: tuple[int, int]) -> PEScheme:
    """Create the scheme and register its trainable tensors, if any."""
    if tag not in PE_TAGS:
        raise ConfigError(f"unknown pe scheme {tag!r}; choose from {PE_TAGS}")
    if tag == "learnable":
        if C % 2 != 0:
            raise ConfigError(f"learnable encoding needs even channels, got {C}")
        weights = PEWeights(
            a=store.uniform("pe.a", (C,), -6.0, 6.0),
            b=store.uniform("pe.b", (C,), -6.0, 6.0),
            c=store.uniform("pe.c", (C,), 0.0, 2.0 * np.pi),
        )
        return PEScheme(tag, C, store.dtype, weights=weights)
    if tag == "discrete":
        h, w = grid_hw
        table = store.normal("pe.table", (h * w, C), 0.5)
        return PEScheme(tag, C, store.dtype, table=table, grid_hw=(h, w))
    if tag == "fixed" and C % 4 != 0:
        raise ConfigError(f"fixed encoding needs channels divisible by 4, got {C}")
    return PEScheme(tag, C, store.dtype)
