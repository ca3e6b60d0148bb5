"""Losses, optimizer, checkpoint serialization, and the training loop.

Everything downstream of (config, seed) is deterministic: batches come
from counter-derived seeds, reductions run in fixed order, and the
metrics stream plus checkpoints are pure functions of the run inputs.
Wall-clock timing therefore goes to the log callback only; the CSV
`seconds` column is a reserved placeholder (always 0.000) so reruns of
the same (config, seed) are byte-identical.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from .autodiff import Tape, Tensor
from .config import SegtranConfig, config_to_text
from .errors import CheckpointFormatError, NumericsError, ShapeError, UsageError
from .model import SegtranModel, build_model
from .params import ParamStore

# ---------------------------------------------------------------------------
# losses


def _channel_axis(logits: Tensor) -> int:
    if logits.ndim < 3:
        raise UsageError(f"logits must be [..,K,H,W], got shape {logits.shape}")
    return logits.ndim - 3


def _check_mask(logits: Tensor, mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    ch = _channel_axis(logits)
    k = logits.shape[ch]
    want = logits.shape[:ch] + logits.shape[ch + 1:]
    if mask.shape != want:
        raise ShapeError(f"mask shape {mask.shape} does not match logits "
                         f"{logits.shape}")
    if mask.min() < 0 or mask.max() >= k:
        raise UsageError(f"mask holds class {int(mask.max())} but logits have "
                         f"only {k} channels")
    return mask


def _one_hot(logits: Tensor, mask: np.ndarray) -> Tensor:
    ch = _channel_axis(logits)
    k = logits.shape[ch]
    hot = np.eye(k, dtype=logits.data.dtype)[mask]          # [.., H, W, K]
    return ad.constant(np.moveaxis(hot, -1, ch))            # [.., K, H, W]


def ce_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over pixels of -log softmax(logits)[true class]."""
    mask = _check_mask(logits, mask)
    ch = _channel_axis(logits)
    logp = ad.log_softmax(logits, axis=ch)
    picked = ad.tsum(ad.mul(logp, _one_hot(logits, mask)), axis=ch)
    return ad.neg(ad.tmean(picked))


DICE_EPS = 1.0


def dice_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """1 - mean soft dice over foreground classes, per sample then averaged."""
    mask = _check_mask(logits, mask)
    ch = _channel_axis(logits)
    k = logits.shape[ch]
    if k < 2:
        raise UsageError(f"dice needs at least 2 classes, got {k}")
    p = ad.softmax(logits, axis=ch)
    g = _one_hot(logits, mask)
    inter = ad.tsum(ad.mul(p, g), axis=(-2, -1))            # [.., K]
    psum = ad.tsum(p, axis=(-2, -1))
    gsum = ad.tsum(g, axis=(-2, -1))
    d = ad.div(inter * 2.0 + DICE_EPS, ad.add(psum, gsum) + DICE_EPS)
    fg = np.ones(k, dtype=logits.data.dtype)
    fg[0] = 0.0
    denom = float(np.prod(d.shape[:-1], dtype=np.int64)) * (k - 1)
    mean_fg = ad.tsum(ad.mul(d, ad.constant(fg))) * (1.0 / denom)
    return 1.0 - mean_fg


def combined_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    return (ce_loss(logits, mask) + dice_loss(logits, mask)) * 0.5


def dice_score(pred: np.ndarray, gt: np.ndarray, k: int) -> np.ndarray:
    """Hard per-class dice; a class absent from both masks scores 1.0."""
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    out = np.zeros(k)
    for c in range(k):
        p = pred == c
        g = gt == c
        total = int(p.sum()) + int(g.sum())
        out[c] = 1.0 if total == 0 else 2.0 * int((p & g).sum()) / total
    return out


# ---------------------------------------------------------------------------
# optimizer


class TrainState:
    """Parameters plus first/second moment accumulators and a step counter."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}
        self.step = 0


def adamw_step(state: TrainState, lr: float, beta1: float = 0.9,
               beta2: float = 0.999, wd: float = 0.01,
               eps: float = 1e-8) -> None:
    """One decoupled-weight-decay update with bias-corrected moments."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in state.params:
        if not p.requires_grad:
            continue
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NumericsError(f"non-finite gradient for parameter {name}")
        m = state.m[name] = state.m[name] * beta1 + g * (1.0 - beta1)
        v = state.v[name] = state.v[name] * beta2 + (g * g) * (1.0 - beta2)
        update = (m / c1) / (np.sqrt(v / c2) + eps) + p.data * wd
        p.data = p.data - update * lr


# ---------------------------------------------------------------------------
# checkpoint serialization

CKPT_MAGIC = b"SGTR"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(params: ParamStore) -> bytes:
    out = bytearray(CKPT_MAGIC)
    out += struct.pack("<I", CKPT_VERSION)
    out += struct.pack("<I", len(params))
    for name, p in params:
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        tag = 1 if p.data.dtype == np.float64 else 0
        out += struct.pack("<BB", tag, p.data.ndim)
        for extent in p.data.shape:
            out += struct.pack("<Q", extent)
        out += np.ascontiguousarray(p.data).astype(_DTYPE_TAGS[tag],
                                                   copy=False).tobytes()
    return bytes(out)


def load_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)

    def take(n: int) -> memoryview:
        nonlocal view
        if len(view) < n:
            raise CheckpointFormatError("checkpoint truncated")
        head, view = view[:n], view[n:]
        return head

    if bytes(take(4)) != CKPT_MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name}")
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(rank))
        dtype = _DTYPE_TAGS[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(take(n_bytes), dtype=dtype).reshape(shape)
        tensors[name] = data.copy()
    if len(view):
        raise CheckpointFormatError(f"{len(view)} trailing bytes after payload")
    return tensors


def load_into(params: ParamStore, blob: bytes) -> None:
    """Install checkpoint tensors into an existing store, strict on shapes."""
    tensors = load_checkpoint(blob)
    missing = [n for n, _ in params if n not in tensors]
    extra = [n for n in tensors if n not in params]
    if missing or extra:
        raise ShapeError(f"checkpoint/model parameter sets differ; "
                         f"missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params:
        arr = tensors[name]
        if arr.shape != p.data.shape:
            raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} "
                             f"!= model shape {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=False)


# ---------------------------------------------------------------------------
# evaluation and the training loop


def predict(model: SegtranModel, images: np.ndarray) -> np.ndarray:
    """Argmax class map for a [B,D,H,W] image batch (no gradients)."""
    logits = model.forward(ad.constant(images.astype(model.store.dtype)))
    return np.argmax(logits.data, axis=-3)


def evaluate(model: SegtranModel, samples, batch: int = 8) -> np.ndarray:
    """Mean per-foreground-class hard dice over the sample list."""
    k = model.cfg.classes
    acc = np.zeros(k - 1)
    for start in range(0, len(samples), batch):
        group = samples[start:start + batch]
        images = np.stack([s.image for s in group])
        preds = predict(model, images)
        for pred, s in zip(preds, group):
            acc += dice_score(pred, s.mask, k)[1:]
    return acc / len(samples)


@dataclass
class TrainResult:
    model: SegtranModel
    rows: list[str]                  # metrics CSV body lines
    header: str
    final_dice: np.ndarray | None    # per foreground class
    best_dice: float
    out_dir: Path | None = None
    diverged: bool = False


def metrics_header(k: int) -> str:
    dice_cols = ",".join(f"dice_c{c}" for c in range(1, k))
    return f"iter,loss_ce,loss_dice,loss_total,{dice_cols},seconds"


def _write_run_files(out_dir: Path, cfg: SegtranConfig, header: str,
                     rows: list[str], final_blob: bytes,
                     best_blob: bytes) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    (out_dir / "metrics.csv").write_text("\n".join([header] + rows) + "\n",
                                         encoding="utf-8")
    (out_dir / "final.ckpt").write_bytes(final_blob)
    (out_dir / "best.ckpt").write_bytes(best_blob)


def train(cfg: SegtranConfig, out_dir: str | Path | None = None,
          log=None) -> TrainResult:
    """Run the full seeded loop; returns metrics and the trained model.

    When `out_dir` is given, writes config.txt, metrics.csv, final.ckpt
    and best.ckpt (highest held-out mean dice).  On a non-finite loss the
    run stops, files are still written, and the result is flagged.
    """
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    model = build_model(cfg)
    state = TrainState(model.store)
    k = cfg.classes
    header = metrics_header(k)
    rows: list[str] = []
    holdout = data_mod.holdout_samples(cfg.task, cfg.image_size,
                                      cfg.image_size, cfg.holdout)
    best = -1.0
    best_blob = save_checkpoint(model.store)
    final_dice = None
    diverged = False
    start = time.perf_counter()

    for it in range(1, cfg.iters + 1):
        images, masks = data_mod.batch_for_step(cfg, it - 1)
        x = ad.constant(images.astype(model.store.dtype))
        with Tape() as tape:
            logits = model.forward(x)
            ce = ce_loss(logits, masks)
            dl = dice_loss(logits, masks)
            loss = (ce + dl) * 0.5
        if not np.isfinite(loss.data):
            diverged = True
            rows.append(",".join([str(it), "nan", "nan", "nan"]
                                 + [""] * (k - 1) + ["0.000"]))
            break
        model.store.zero_grad()
        tape.backward(loss)
        adamw_step(state, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay,
                   cfg.adam_eps)

        dice_cols = [""] * (k - 1)
        if it % cfg.eval_every == 0 or it == cfg.iters:
            per_class = evaluate(model, holdout, cfg.batch)
            final_dice = per_class
            mean_fg = float(per_class.mean())
            if mean_fg > best:
                best = mean_fg
                best_blob = save_checkpoint(model.store)
            dice_cols = [f"{v:.6f}" for v in per_class]
            if log:
                log(f"iter {it}: loss {float(loss.data):.4f} "
                    f"dice {mean_fg:.4f} "
                    f"({time.perf_counter() - start:.0f}s)")
        rows.append(",".join(
            [str(it), f"{float(ce.data):.6f}", f"{float(dl.data):.6f}",
             f"{float(loss.data):.6f}"] + dice_cols + ["0.000"]))

    final_blob = save_checkpoint(model.store)
    if best < 0:
        best_blob = final_blob
    if out_dir is not None:
        _write_run_files(out_dir, cfg, header, rows, final_blob, best_blob)
    result = TrainResult(model=model, rows=rows, header=header,
                         final_dice=final_dice, best_dice=max(best, 0.0),
                         out_dir=out_dir, diverged=diverged)
    if diverged:
        where = f"; files written to {out_dir}" if out_dir else ""
        raise NumericsError(f"loss became non-finite at iteration "
                            f"{len(rows)}{where}")
    return result


def load_run(run_dir: str | Path, which: str = "best") -> SegtranModel:
    """Rebuild the model recorded in a training run directory."""
    from .config import load_config, make_config

    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.txt"
    if not cfg_path.exists():
        raise UsageError(f"no config.txt in {run_dir}; not a run directory?")
    cfg = make_config(load_config(cfg_path))
    model = build_model(cfg)
    ckpt = run_dir / f"{which}.ckpt"
    if not ckpt.exists():
        raise UsageError(f"no {which}.ckpt in {run_dir}")
    load_into(model.store, ckpt.read_bytes())
    return model
