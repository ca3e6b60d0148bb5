"""Shared fixtures for the acceptance suite.

The expensive trained models are session-scoped so the training-target,
long-range and knockout criteria reuse the same runs.  Each criterion
test registers a PASS/FAIL line that is echoed in the terminal summary.
"""

import time

import pytest

from segtran.config import make_config
from segtran.training import train

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def record_criterion():
    """Record one PASS/FAIL summary line per acceptance criterion."""

    def rec(num: int, ok: bool, detail: str) -> None:
        word = "PASS" if ok else "FAIL"
        _ACCEPTANCE_LINES.append(f"criterion {num:2d}: {word}  {detail}")

    return rec


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.line(line)


@pytest.fixture(scope="session")
def rings_runs(tmp_path_factory):
    """Default-config rings runs on seeds 0..2: (seed, result, seconds)."""
    runs = []
    for seed in (0, 1, 2):
        cfg = make_config(seed=seed)
        out = tmp_path_factory.mktemp(f"rings_s{seed}")
        t0 = time.perf_counter()
        res = train(cfg, out_dir=out)
        runs.append((seed, res, time.perf_counter() - t0))
    return runs


# The corner task needs a hotter, longer schedule than rings: the class
# cue is a tiny far-corner patch, and the center logit's sensitivity to
# it starts five orders of magnitude below logit scale.  At lr 5e-4 that
# sensitivity grows steadily and the run escapes the predict-one-class
# plateau (dice 0.5) around iteration 7000-8000; 2e-4 never leaves the
# plateau in that budget and 1e-3 actively suppresses the cue pathway.
CORNER_ITERS = 9000
CORNER_LR = 5e-4


@pytest.fixture(scope="session")
def corner_pairs(tmp_path_factory):
    """corner_cue runs per seed: (seed, full_result, cnn_only_result)."""
    pairs = []
    for seed in (0, 1, 2):
        full = train(make_config(task="corner_cue", seed=seed,
                                 iters=CORNER_ITERS, lr=CORNER_LR,
                                 eval_every=250),
                     out_dir=tmp_path_factory.mktemp(f"corner_full_s{seed}"))
        cnn = train(make_config(task="corner_cue", seed=seed,
                                iters=CORNER_ITERS, lr=CORNER_LR,
                                eval_every=250, cnn_only=True),
                    out_dir=tmp_path_factory.mktemp(f"corner_cnn_s{seed}"))
        pairs.append((seed, full, cnn))
    return pairs
