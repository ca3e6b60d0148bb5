"""Procedural segmentation tasks, bitwise-deterministic per seed.

* ``rings``       two concentric random ellipses on a shaded background:
                  outer ring is class 1, inner core class 2.  Local
                  intensity is informative, so short training suffices.
* ``blobs``       one to three filled ellipses, class 1 against background.
* ``corner_cue``  a centered square whose class (1 or 2) is encoded ONLY
                  by a tiny 4x4 marker in a far corner: bright marker
                  means class 1, dark means class 2.  The square itself
                  looks identical either way, so per-pixel evidence is
                  useless and the label must travel at least half the
                  image width.

Train and held-out streams draw from disjoint seed ranges: training
seeds are even, held-out seeds are odd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import TASK_CLASSES, SegtranConfig
from .errors import ConfigError

TASK_CODE = {"rings": 1, "blobs": 2, "corner_cue": 3}

NOISE_STD = 0.06
MARKER = 4  # corner marker edge length, pixels


@dataclass
class SyntheticSample:
    image: np.ndarray   # [1, H, W] float32 in [0, 1]
    mask: np.ndarray    # [H, W] int64 in {0..K-1}
    seed: int
    task: str


def _check_extents(h: int, w: int) -> None:
    if h % 16 != 0 or w % 16 != 0 or h < 16 or w < 16:
        raise ConfigError(f"extents must be positive multiples of 16, "
                          f"got {h}x{w}")


def _ellipse(h: int, w: int, cy: float, cx: float, ry: float, rx: float,
             theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dy = yy - cy
    dx = xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _shade(h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    return 0.08 * yy / h + 0.12 * xx / w


def _finish(rng: np.random.Generator, base: np.ndarray, mask: np.ndarray,
            seed: int, task: str) -> SyntheticSample:
    img = base + rng.normal(0.0, NOISE_STD, base.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SyntheticSample(img[None], mask.astype(np.int64), seed, task)


def _gen_rings(rng: np.random.Generator, seed: int, h: int, w: int) -> SyntheticSample:
    cy = h / 2 + rng.uniform(-h / 8, h / 8)
    cx = w / 2 + rng.uniform(-w / 8, w / 8)
    ry = rng.uniform(h / 5, h / 3.2)
    rx = rng.uniform(w / 5, w / 3.2)
    theta = rng.uniform(0.0, np.pi)
    inner = rng.uniform(0.35, 0.6)
    outer_region = _ellipse(h, w, cy, cx, ry, rx, theta)
    inner_region = _ellipse(h, w, cy, cx, inner * ry, inner * rx, theta)
    mask = np.zeros((h, w), dtype=np.int64)
    mask[outer_region] = 1
    mask[inner_region] = 2
    base = 0.2 + _shade(h, w)
    base[mask == 1] = 0.5
    base[mask == 2] = 0.8
    return _finish(rng, base, mask, seed, "rings")


def _gen_blobs(rng: np.random.Generator, seed: int, h: int, w: int) -> SyntheticSample:
    count = int(rng.integers(1, 4))
    region = np.zeros((h, w), dtype=bool)
    for _ in range(count):
        cy = rng.uniform(0.2 * h, 0.8 * h)
        cx = rng.uniform(0.2 * w, 0.8 * w)
        ry = rng.uniform(h / 10, h / 5)
        rx = rng.uniform(w / 10, w / 5)
        theta = rng.uniform(0.0, np.pi)
        region |= _ellipse(h, w, cy, cx, ry, rx, theta)
    mask = region.astype(np.int64)
    base = 0.25 + _shade(h, w)
    base[region] = 0.7
    return _finish(rng, base, mask, seed, "blobs")


def corner_cue_sample(seed: int, h: int, w: int,
                      force_bright: bool | None = None) -> SyntheticSample:
    """One corner_cue sample; `force_bright` overrides the marker coin.

    The marker coin and geometry consume the same generator draws either
    way, so the two forced variants of a seed differ only in the marker
    pixels and the center-square class.
    """
    _check_extents(h, w)
    rng = np.random.default_rng([seed, TASK_CODE["corner_cue"]])
    side = h // 4
    top = (h - side) // 2
    left = (w - side) // 2

    bright = bool(rng.integers(0, 2))
    if force_bright is not None:
        bright = force_bright
    corner = int(rng.integers(0, 4))
    min_dist = h / 2
    center = np.array([h / 2, w / 2])
    ty = tx = 0
    for _ in range(100):
        oy = int(rng.integers(0, h // 8 + 1))
        ox = int(rng.integers(0, w // 8 + 1))
        ty = oy if corner in (0, 1) else h - MARKER - oy
        tx = ox if corner in (0, 2) else w - MARKER - ox
        mc = np.array([ty + MARKER / 2, tx + MARKER / 2])
        if np.linalg.norm(mc - center) >= min_dist:
            break
    else:
        ty = 0 if corner in (0, 1) else h - MARKER
        tx = 0 if corner in (0, 2) else w - MARKER

    base = np.full((h, w), 0.45)
    base[top:top + side, left:left + side] = 0.7
    base[ty:ty + MARKER, tx:tx + MARKER] = 0.95 if bright else 0.05
    mask = np.zeros((h, w), dtype=np.int64)
    mask[top:top + side, left:left + side] = 1 if bright else 2
    return _finish(rng, base, mask, seed, "corner_cue")


def gen_synthetic(seed: int, task: str, h: int, w: int,
                  k: int | None = None) -> SyntheticSample:
    """Deterministic sample; identical (seed, task, H, W) give identical bits."""
    if task not in TASK_CODE:
        raise ConfigError(f"unknown task {task!r}; choose from {tuple(TASK_CODE)}")
    if k is not None and k != TASK_CLASSES[task]:
        raise ConfigError(f"task {task} defines {TASK_CLASSES[task]} classes, "
                          f"caller asked for {k}")
    _check_extents(h, w)
    if task == "corner_cue":
        return corner_cue_sample(seed, h, w)
    rng = np.random.default_rng([seed, TASK_CODE[task]])
    if task == "rings":
        return _gen_rings(rng, seed, h, w)
    return _gen_blobs(rng, seed, h, w)


# ---------------------------------------------------------------------------
# seed bookkeeping for training and evaluation


def train_seed(config_seed: int, index: int) -> int:
    return 2 * (config_seed * 1_000_000 + index)


def holdout_seed(index: int) -> int:
    return 2 * index + 1


def batch_for_step(cfg: SegtranConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    """[B,1,H,W] images and [B,H,W] masks for one training step."""
    images, masks = [], []
    for j in range(cfg.batch):
        s = gen_synthetic(train_seed(cfg.seed, step * cfg.batch + j), cfg.task,
                          cfg.image_size, cfg.image_size)
        images.append(s.image)
        masks.append(s.mask)
    return np.stack(images), np.stack(masks)


def holdout_samples(task: str, h: int, w: int, n: int) -> list[SyntheticSample]:
    """Fixed held-out set; identical for every config seed."""
    return [gen_synthetic(holdout_seed(j), task, h, w) for j in range(n)]
