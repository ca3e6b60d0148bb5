"""Model probes: effective-receptive-field maps, mode knockout, parameter
accounting, and the ablation harness.

The ERF probe backpropagates a single center logit to the input plane and
reports how widely the gradient mass spreads.  Knockout re-scores a model
with one expansion mode's gate forced off.  `ablate` trains a grid of
config variants with shared seeds and emits one CSV row per (cell, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention as at
from . import data as data_mod
from .autodiff import Tape, Tensor
from .config import TASK_CLASSES, SegtranConfig, make_config
from .errors import SegtranError, UsageError
from .training import evaluate, train

# ---------------------------------------------------------------------------
# effective receptive field


@dataclass
class ErfReport:
    grad_map: np.ndarray       # [H, W] non-negative, summed over channels
    spread_fraction: float     # share of pixels above tau * max
    rms_radius: float          # RMS distance of those pixels from center
    tau: float
    class_index: int


def erf_probe(model, image: np.ndarray, class_index: int | None = None,
              tau: float = 0.01) -> ErfReport:
    """Gradient influence of the input on the center pixel's logit.

    `model` needs a `forward(Tensor) -> Tensor` mapping [B,D,H,W] to
    [B,K,H,W].  When `class_index` is None the class predicted at the
    center is probed.
    """
    if tau <= 0.0 or tau >= 1.0:
        raise UsageError(f"tau must be in (0, 1), got {tau}")
    arr = np.asarray(image)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise UsageError(f"expected one [D,H,W] image, got shape {arr.shape}")
    h, w = arr.shape[-2], arr.shape[-1]
    cy, cx = h // 2, w // 2
    x = Tensor(arr.astype(np.float64, copy=True), dtype=np.float64,
               requires_grad=True, name="erf_input")
    with Tape() as tape:
        logits = model.forward(x)
        k = logits.shape[-3]
        if class_index is None:
            class_index = int(np.argmax(logits.data[..., :, cy, cx]))
        if not 0 <= class_index < k:
            raise UsageError(f"class index {class_index} out of range for "
                             f"{k} classes")
        cot = np.zeros_like(logits.data)
        cot[..., class_index, cy, cx] = 1.0
        tape.backward(logits, cotangent=cot)
    grad_map = np.abs(x.grad[0]).sum(axis=0)
    mx = float(grad_map.max())
    if mx <= 0.0:
        return ErfReport(grad_map, 0.0, 0.0, tau, class_index)
    above = grad_map > tau * mx
    ys, xs = np.nonzero(above)
    spread = float(above.mean())
    radius = float(np.sqrt(np.mean((ys - cy) ** 2 + (xs - cx) ** 2)))
    return ErfReport(grad_map, spread, radius, tau, class_index)


def analytic_rf_half_width(stages: int = 4, k: int = 3) -> int:
    """Input-pixel reach of one output pixel, from kernel/stride arithmetic.

    Encoder: per stage one stride-2 and one stride-1 conv of extent k.
    The decoder's bilinear upsamplings add at most one source pixel of
    the respective grid (jump 16, 8 and 2); 1x1 convs add nothing.
    """
    r, jump = 1, 1
    for _ in range(stages):
        r += (k - 1) * jump
        jump *= 2
        r += (k - 1) * jump
    half = (r - 1) // 2
    return half + 16 + 8 + 2


def write_pgm(path, grad_map: np.ndarray) -> None:
    """Max-normalized 8-bit grayscale, binary PGM (P5)."""
    a = np.asarray(grad_map, dtype=np.float64)
    if a.ndim != 2:
        raise UsageError(f"gradient map must be 2-D, got shape {a.shape}")
    mx = a.max()
    if mx > 0:
        scaled = np.clip(a / mx * 255.0, 0.0, 255.0).round().astype(np.uint8)
    else:
        scaled = np.zeros(a.shape, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(scaled.tobytes())


def write_erf_csv(path, report: ErfReport) -> None:
    text = ("tau,spread_fraction,rms_radius\n"
            f"{report.tau:g},{report.spread_fraction:.6f},"
            f"{report.rms_radius:.6f}\n")
    Path(path).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# mode knockout


@dataclass
class KnockoutReport:
    mode_index: int
    base_dice: np.ndarray      # per foreground class
    knocked_dice: np.ndarray

    @property
    def delta(self) -> float:
        return float(self.base_dice.mean() - self.knocked_dice.mean())


def _mode_count(cfg: SegtranConfig) -> int:
    if cfg.cnn_only:
        raise UsageError("cnn_only model has no expansion modes to knock out")
    if cfg.transformer == "mha":
        raise UsageError("mha transformer has no expansion modes to knock out")
    return 1 if cfg.transformer == "squeeze_single" else cfg.modes


def mode_knockout(model, mode_index: int, samples,
                  batch: int = 8) -> KnockoutReport:
    """Dice with one mode's gate forced off and renormalized, vs baseline."""
    nm = _mode_count(model.cfg)
    if not 0 <= mode_index < nm:
        raise UsageError(f"mode index {mode_index} out of range for {nm} modes")
    base = evaluate(model, samples, batch)
    with at.suppress_mode(mode_index):
        knocked = evaluate(model, samples, batch)
    return KnockoutReport(mode_index, base, knocked)


def knockout_all(model, samples, batch: int = 8) -> list[KnockoutReport]:
    return [mode_knockout(model, i, samples, batch)
            for i in range(_mode_count(model.cfg))]


def write_knockout_csv(path, reports: list[KnockoutReport]) -> None:
    lines = ["mode,mean_dice_base,mean_dice_knocked,delta"]
    for r in reports:
        lines.append(f"{r.mode_index},{r.base_dice.mean():.6f},"
                     f"{r.knocked_dice.mean():.6f},{r.delta:.6f}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# parameter accounting

PARAM_GROUPS = ("backbone", "fpn", "pe", "transformer", "head")


def param_count(model) -> dict[str, int]:
    """Exact parameter counts by named group, plus the total."""
    counts = {g: model.store.count(g) for g in PARAM_GROUPS}
    counts["total"] = model.store.count()
    covered = sum(counts[g] for g in PARAM_GROUPS)
    if covered != counts["total"]:
        raise SegtranError(f"parameter groups cover {covered} of "
                           f"{counts['total']} parameters")
    return counts


# ---------------------------------------------------------------------------
# ablation harness


@dataclass
class AblationCell:
    name: str
    overrides: dict


@dataclass
class AblationGrid:
    name: str
    task: str
    cells: list[AblationCell]


def transformer_grid() -> AblationGrid:
    """Transformer-type sweep, judged on the long-range corner_cue task."""
    cells = [
        AblationCell("squeeze_expand", {"transformer": "squeeze_expand"}),
        AblationCell("squeeze_single", {"transformer": "squeeze_single"}),
        AblationCell("expand_only", {"transformer": "expand_only"}),
        AblationCell("mha", {"transformer": "mha"}),
        AblationCell("cnn_only", {"cnn_only": True}),
    ]
    return AblationGrid("transformer", "corner_cue", cells)


def pe_grid() -> AblationGrid:
    cells = [AblationCell(tag, {"pe": tag})
             for tag in ("none", "fixed", "discrete", "learnable")]
    return AblationGrid("pe", "rings", cells)


def depth_grid() -> AblationGrid:
    cells = [AblationCell(f"layers{n}", {"layers": n}) for n in (1, 2, 3, 4)]
    return AblationGrid("depth", "rings", cells)


GRIDS = {"transformer": transformer_grid, "pe": pe_grid, "depth": depth_grid}


def _branch_count(cfg: SegtranConfig) -> int:
    if cfg.cnn_only:
        return 0
    if cfg.transformer == "mha":
        return cfg.heads
    if cfg.transformer == "squeeze_single":
        return 1
    return cfg.modes


def ablation_header(k: int) -> str:
    dice_cols = ",".join(f"dice_c{c}" for c in range(1, k))
    return f"cell,transformer,pe,layers,modes,seed,{dice_cols},status"


def ablate(grid: AblationGrid, seeds=(0, 1, 2), iters: int = 300,
           image_size: int = 64, out_path=None, log=None) -> tuple[str, list[str]]:
    """Train every (cell, seed) and collect final per-class dice rows.

    A failing cell is recorded with an error status and the remaining
    cells still run; rows are a pure function of (grid, seeds, iters).
    """
    k = TASK_CLASSES[grid.task]
    header = ablation_header(k)
    rows = []
    for cell in grid.cells:
        for seed in seeds:
            overrides = dict(task=grid.task, seed=seed, iters=iters,
                             image_size=image_size, eval_every=max(iters, 1))
            overrides.update(cell.overrides)
            dice_cols = [""] * (k - 1)
            try:
                cfg = make_config(**overrides)
                shown = ("none" if cfg.cnn_only else cfg.transformer,
                         "-" if cfg.cnn_only else cfg.pe,
                         0 if cfg.cnn_only else cfg.layers,
                         _branch_count(cfg))
                result = train(cfg)
                if result.final_dice is not None:
                    dice_cols = [f"{v:.6f}" for v in result.final_dice]
                status = "ok"
            except SegtranError as exc:
                cfg = None
                shown = (str(cell.overrides.get("transformer", "?")),
                         str(cell.overrides.get("pe", "?")),
                         cell.overrides.get("layers", "?"), "?")
                status = f"error: {type(exc).__name__}"
            rows.append(",".join([cell.name, str(shown[0]), str(shown[1]),
                                  str(shown[2]), str(shown[3]), str(seed)]
                                 + dice_cols + [status]))
            if log:
                log(f"{grid.name}/{cell.name} seed {seed}: {status} "
                    + (",".join(dice_cols) if dice_cols[0] else ""))
    if out_path is not None:
        Path(out_path).write_text("\n".join([header] + rows) + "\n",
                                  encoding="utf-8")
    return header, rows


def holdout_for(cfg: SegtranConfig, n: int | None = None):
    return data_mod.holdout_samples(cfg.task, cfg.image_size, cfg.image_size,
                                    n if n is not None else cfg.holdout)
