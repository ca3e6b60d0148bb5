"""Command-line entry points.

    segtran train    --task rings --size 64 --seed 0 --out run/
    segtran eval     --run run/ [--which best|final]
    segtran erf      --ckpt run/best.ckpt --out run/
    segtran knockout --run run/ --out run/
    segtran ablate   --grid transformer --out results/
    segtran gradcheck
    segtran params   [--task rings ...]

Exit codes: 0 success, 1 usage/configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import gradcases, probes
from .config import PE_TAGS, TRANSFORMER_TAGS, load_config, make_config
from .errors import ConfigError, SegtranError, UsageError
from .model import build_model
from .training import evaluate, load_into, load_run, train


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; the contract here is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(1)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model configuration")
    g.add_argument("--config", help="key = value config file; flags override")
    g.add_argument("--task", choices=("rings", "blobs", "corner_cue"))
    g.add_argument("--size", type=int, dest="image_size",
                   help="square input extent, divisible by 16")
    g.add_argument("--channels", help="4 backbone widths, comma-separated")
    g.add_argument("--transformer", choices=TRANSFORMER_TAGS)
    g.add_argument("--layers", type=int)
    g.add_argument("--modes", type=int)
    g.add_argument("--codebook", type=int)
    g.add_argument("--heads", type=int)
    g.add_argument("--pe", choices=PE_TAGS)
    g.add_argument("--no-layernorm", action="store_true")
    g.add_argument("--cnn-only", action="store_true")
    g.add_argument("--batch", type=int)
    g.add_argument("--iters", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--eval-every", type=int)
    g.add_argument("--holdout", type=int)


def _config_from_args(args) -> "SegtranConfig":
    file_values = load_config(args.config) if args.config else None
    channels = None
    if args.channels:
        try:
            channels = tuple(int(c) for c in args.channels.split(","))
        except ValueError:
            raise UsageError(f"--channels expects integers, got "
                             f"{args.channels!r}") from None
    return make_config(
        file_values,
        task=args.task, image_size=args.image_size, channels=channels,
        transformer=args.transformer, layers=args.layers, modes=args.modes,
        codebook=args.codebook, heads=args.heads, pe=args.pe,
        layernorm=False if args.no_layernorm else None,
        cnn_only=True if args.cnn_only else None,
        batch=args.batch, iters=args.iters, lr=args.lr, seed=args.seed,
        eval_every=args.eval_every, holdout=args.holdout,
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model_for(args):
    """Model named either by --run <dir> or --ckpt <dir>/<which>.ckpt."""
    if getattr(args, "run", None):
        return load_run(args.run, getattr(args, "which", "best"))
    if getattr(args, "ckpt", None):
        ckpt = Path(args.ckpt)
        cfg_path = ckpt.parent / "config.txt"
        if not cfg_path.exists():
            raise UsageError(f"no config.txt next to {ckpt}")
        cfg = make_config(load_config(cfg_path))
        model = build_model(cfg)
        load_into(model.store, ckpt.read_bytes())
        return model
    raise UsageError("pass --run <dir> or --ckpt <file>")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _out_dir(args)
    result = train(cfg, out_dir=out, log=lambda msg: print(msg))
    if result.final_dice is not None:
        mean = float(result.final_dice.mean())
        print(f"final mean foreground dice: {mean:.4f} "
              f"(best {result.best_dice:.4f})")
    print(f"run files in {out}")
    return 0


def _cmd_eval(args) -> int:
    model = _load_model_for(args)
    samples = probes.holdout_for(model.cfg, args.holdout)
    per_class = evaluate(model, samples, model.cfg.batch)
    for c, v in enumerate(per_class, start=1):
        print(f"dice_c{c}: {v:.4f}")
    print(f"mean foreground dice: {float(per_class.mean()):.4f}")
    return 0


def _cmd_erf(args) -> int:
    model = _load_model_for(args)
    cfg = model.cfg
    sample = probes.holdout_for(cfg, 1)[0]
    report = probes.erf_probe(model, sample.image, args.class_index, args.tau)
    out = _out_dir(args)
    probes.write_erf_csv(out / "erf.csv", report)
    probes.write_pgm(out / "erf.pgm", report.grad_map)
    print(f"class {report.class_index}: spread {report.spread_fraction:.4f}, "
          f"rms radius {report.rms_radius:.1f}px")
    print(f"wrote {out / 'erf.csv'} and {out / 'erf.pgm'}")
    return 0


def _cmd_knockout(args) -> int:
    model = _load_model_for(args)
    samples = probes.holdout_for(model.cfg, args.holdout)
    if args.mode is not None:
        reports = [probes.mode_knockout(model, args.mode, samples,
                                        model.cfg.batch)]
    else:
        reports = probes.knockout_all(model, samples, model.cfg.batch)
    for r in reports:
        print(f"mode {r.mode_index}: dice {r.base_dice.mean():.4f} -> "
              f"{r.knocked_dice.mean():.4f} (delta {r.delta:+.4f})")
    if args.out:
        out = _out_dir(args)
        probes.write_knockout_csv(out / "knockout.csv", reports)
        print(f"wrote {out / 'knockout.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    try:
        seeds = tuple(int(s) for s in args.seeds.split(","))
    except ValueError:
        raise UsageError(f"--seeds expects integers, got {args.seeds!r}") from None
    names = list(probes.GRIDS) if args.grid == "all" else [args.grid]
    out = _out_dir(args)
    for name in names:
        grid = probes.GRIDS[name]()
        path = out / f"ablation_{name}.csv"
        probes.ablate(grid, seeds=seeds, iters=args.iters,
                      image_size=args.image_size or 64, out_path=path,
                      log=lambda msg: print(msg))
        print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    tol = 1e-4
    failed = []
    for name in gradcases.CASES:
        err = gradcases.run_case(name, seed=args.seed or 0)
        ok = err < tol
        print(f"{name:20s} {err:.3e}  {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    err = gradcases.end_to_end(seed=args.seed or 0)
    ok = err < tol
    print(f"{'end_to_end':20s} {err:.3e}  {'ok' if ok else 'FAIL'}")
    if not ok:
        failed.append("end_to_end")
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 2
    return 0


def _cmd_params(args) -> int:
    if getattr(args, "run", None) or getattr(args, "ckpt", None):
        model = _load_model_for(args)
    else:
        model = build_model(_config_from_args(args))
    counts = probes.param_count(model)
    for group in probes.PARAM_GROUPS:
        print(f"{group:12s} {counts[group]:>10d}")
    print(f"{'total':12s} {counts['total']:>10d}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="segtran",
                     description="desk-scale transformer segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write run files")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a trained run on held-out data")
    p.add_argument("--run", help="run directory with config.txt + checkpoints")
    p.add_argument("--ckpt", help="checkpoint file (config.txt alongside)")
    p.add_argument("--which", choices=("best", "final"), default="best")
    p.add_argument("--holdout", type=int, default=None)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("erf", help="effective-receptive-field probe")
    p.add_argument("--run")
    p.add_argument("--ckpt")
    p.add_argument("--which", choices=("best", "final"), default="best")
    p.add_argument("--class-index", type=int, default=None)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_erf)

    p = sub.add_parser("knockout", help="score with one mode's gate forced off")
    p.add_argument("--run")
    p.add_argument("--ckpt")
    p.add_argument("--which", choices=("best", "final"), default="best")
    p.add_argument("--mode", type=int, default=None,
                   help="single mode index; default sweeps all modes")
    p.add_argument("--holdout", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_knockout)

    p = sub.add_parser("ablate", help="train a grid of config variants")
    p.add_argument("--grid", choices=tuple(probes.GRIDS) + ("all",),
                   required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--size", type=int, dest="image_size", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts by group")
    _add_config_flags(p)
    p.add_argument("--run")
    p.add_argument("--ckpt")
    p.add_argument("--which", choices=("best", "final"), default="best")
    p.set_defaults(fn=_cmd_params)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SegtranError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
