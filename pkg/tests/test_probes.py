import numpy as np
import pytest

from segtran import Tensor, UsageError
from segtran import probes as pb
from segtran.config import make_config
from segtran.data import holdout_samples
from segtran.model import build_model
from segtran.training import train


class _IdentityModel:
    """Logits equal the single input channel: pure per-pixel identity."""

    def forward(self, x):
        return x


def _tiny(**over):
    base = dict(image_size=32, channels=(4, 8, 16, 16), layers=1, modes=2,
                codebook=8, batch=2, holdout=4)
    base.update(over)
    return make_config(**base)


class TestErfProbe:
    def test_identity_model_is_a_center_delta(self):
        img = np.zeros((1, 16, 16), np.float32)
        r = pb.erf_probe(_IdentityModel(), img, class_index=0)
        assert r.spread_fraction == 1.0 / (16 * 16)
        assert r.rms_radius == 0.0
        assert r.grad_map[8, 8] == 1.0
        assert r.grad_map.sum() == 1.0

    def test_map_nonnegative_and_spread_in_unit_interval(self):
        cfg = _tiny()
        model = build_model(cfg, seed=0)
        img = holdout_samples("rings", 32, 32, 1)[0].image
        r = pb.erf_probe(model, img)
        assert np.all(r.grad_map >= 0.0)
        assert 0.0 < r.spread_fraction <= 1.0
        assert 0 <= r.class_index < 3

    def test_cnn_only_confined_to_analytic_receptive_field(self):
        # kernel/stride arithmetic bounds how far any input pixel can
        # influence the center logit of the conv-only path
        cfg = make_config(cnn_only=True, image_size=192)
        model = build_model(cfg, seed=0)
        img = holdout_samples("rings", 192, 192, 1)[0].image
        r = pb.erf_probe(model, img)
        above = r.grad_map > r.tau * r.grad_map.max()
        ys, xs = np.nonzero(above)
        half = pb.analytic_rf_half_width() + 1
        assert np.abs(ys - 96).max() <= half
        assert np.abs(xs - 96).max() <= half

    def test_bad_tau(self):
        with pytest.raises(UsageError):
            pb.erf_probe(_IdentityModel(), np.zeros((1, 16, 16)), tau=0.0)

    def test_bad_class_index(self):
        with pytest.raises(UsageError):
            pb.erf_probe(_IdentityModel(), np.zeros((1, 16, 16)), class_index=5)

    def test_deterministic(self):
        cfg = _tiny()
        model = build_model(cfg, seed=1)
        img = holdout_samples("rings", 32, 32, 1)[0].image
        a = pb.erf_probe(model, img)
        b = pb.erf_probe(model, img)
        assert np.array_equal(a.grad_map, b.grad_map)
        assert a.spread_fraction == b.spread_fraction


class TestErfOutputs:
    def test_pgm_header_and_payload(self, tmp_path):
        m = np.array([[0.0, 0.5], [1.0, 0.25]])
        path = tmp_path / "m.pgm"
        pb.write_pgm(path, m)
        blob = path.read_bytes()
        assert blob.startswith(b"P5\n2 2\n255\n")
        pixels = blob[len(b"P5\n2 2\n255\n"):]
        assert list(pixels) == [0, 128, 255, 64]

    def test_pgm_all_zero_map(self, tmp_path):
        path = tmp_path / "z.pgm"
        pb.write_pgm(path, np.zeros((3, 4)))
        assert path.read_bytes().endswith(bytes(12))

    def test_erf_csv_columns(self, tmp_path):
        r = pb.ErfReport(np.ones((2, 2)), 0.25, 3.5, 0.01, 1)
        path = tmp_path / "erf.csv"
        pb.write_erf_csv(path, r)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "tau,spread_fraction,rms_radius"
        assert lines[1] == "0.01,0.250000,3.500000"


class TestKnockout:
    def _trained_tiny(self):
        cfg = _tiny(transformer="expand_only", modes=3, iters=3, eval_every=3)
        return train(cfg).model

    def test_zero_gate_mode_changes_nothing(self):
        cfg = _tiny(transformer="expand_only", modes=3)
        model = build_model(cfg, seed=0)
        gate_b = model.store.get("transformer.layer0.gate_b")
        gate_b.data[1] = -1e9  # mode 1's softmax gate underflows to 0
        samples = holdout_samples("rings", 32, 32, 4)
        r = pb.mode_knockout(model, 1, samples, batch=2)
        np.testing.assert_allclose(r.base_dice, r.knocked_dice, atol=1e-12)
        assert r.delta == pytest.approx(0.0, abs=1e-12)

    def test_restore_after_knockout(self):
        model = self._trained_tiny()
        samples = holdout_samples("rings", 32, 32, 4)
        from segtran.training import evaluate
        before = evaluate(model, samples, 2)
        pb.mode_knockout(model, 0, samples, batch=2)
        after = evaluate(model, samples, 2)
        np.testing.assert_array_equal(before, after)

    def test_knockout_all_covers_every_mode(self):
        model = self._trained_tiny()
        samples = holdout_samples("rings", 32, 32, 4)
        reports = pb.knockout_all(model, samples, batch=2)
        assert [r.mode_index for r in reports] == [0, 1, 2]

    def test_mha_model_rejected(self):
        model = build_model(_tiny(transformer="mha", heads=2), seed=0)
        with pytest.raises(UsageError):
            pb.mode_knockout(model, 0, [], batch=2)

    def test_cnn_only_rejected(self):
        model = build_model(_tiny(cnn_only=True), seed=0)
        with pytest.raises(UsageError):
            pb.mode_knockout(model, 0, [], batch=2)

    def test_index_out_of_range(self):
        model = build_model(_tiny(transformer="expand_only", modes=2), seed=0)
        with pytest.raises(UsageError):
            pb.mode_knockout(model, 2, [], batch=2)

    def test_csv_format(self, tmp_path):
        reports = [pb.KnockoutReport(0, np.array([0.8, 0.9]),
                                     np.array([0.7, 0.8]))]
        path = tmp_path / "knockout.csv"
        pb.write_knockout_csv(path, reports)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "mode,mean_dice_base,mean_dice_knocked,delta"
        assert lines[1] == "0,0.850000,0.750000,0.100000"


class TestParamCount:
    def test_groups_cover_total(self):
        counts = pb.param_count(build_model(_tiny(), seed=0))
        assert counts["total"] == sum(counts[g] for g in pb.PARAM_GROUPS)
        assert counts["total"] > 0

    def test_pe_none_contributes_zero(self):
        counts = pb.param_count(build_model(_tiny(pe="none"), seed=0))
        assert counts["pe"] == 0

    def test_doubling_modes_doubles_transformer_count(self):
        a = pb.param_count(build_model(_tiny(transformer="expand_only",
                                             modes=2), seed=0))
        b = pb.param_count(build_model(_tiny(transformer="expand_only",
                                             modes=4), seed=0))
        assert b["transformer"] == 2 * a["transformer"]

    def test_default_total_matches_shape_arithmetic(self):
        counts = pb.param_count(build_model(make_config(), seed=0))

        def conv(cin, cout, k):
            return cout * cin * k * k + cout

        backbone = 0
        cin = 1
        for cout in (16, 32, 64, 64):
            backbone += conv(cin, cout, 3) + conv(cout, cout, 3)
            cin = cout
        fpn = conv(64, 64, 1) + conv(16, 32, 1) + conv(32, 64, 1)
        pe = 3 * 64
        single_head = 2 * 64 * 64 + (64 * 128 + 128) + (128 * 64 + 64) + 4 * 64
        modes = 4 * (single_head + 64 + 1)
        sab = 64 * 64 + single_head + modes
        head = conv(64, 3, 1)
        assert counts["backbone"] == backbone
        assert counts["fpn"] == fpn
        assert counts["pe"] == pe
        assert counts["transformer"] == 3 * sab
        assert counts["head"] == head
        assert counts["total"] == backbone + fpn + pe + 3 * sab + head


class TestAblate:
    def test_single_cell_single_seed(self):
        grid = pb.AblationGrid("mini", "rings", [
            pb.AblationCell("tiny", dict(channels=(4, 8, 16, 16), batch=2,
                                         holdout=4, codebook=8, layers=1,
                                         modes=2))])
        header, rows = pb.ablate(grid, seeds=(0,), iters=2, image_size=32)
        assert header == ("cell,transformer,pe,layers,modes,seed,"
                          "dice_c1,dice_c2,status")
        assert len(rows) == 1
        cells = rows[0].split(",")
        assert cells[0] == "tiny"
        assert cells[-1] == "ok"
        assert cells[5] == "0"
        float(cells[6]), float(cells[7])  # dice columns parse

    def test_rerun_identical(self, tmp_path):
        grid = pb.AblationGrid("mini", "rings", [
            pb.AblationCell("tiny", dict(channels=(4, 8, 16, 16), batch=2,
                                         holdout=4, codebook=8, layers=1,
                                         modes=2))])
        a = pb.ablate(grid, seeds=(0, 1), iters=2, image_size=32,
                      out_path=tmp_path / "a.csv")
        b = pb.ablate(grid, seeds=(0, 1), iters=2, image_size=32,
                      out_path=tmp_path / "b.csv")
        assert a == b
        assert (tmp_path / "a.csv").read_text() == \
            (tmp_path / "b.csv").read_text()

    def test_failing_cell_recorded_and_run_continues(self):
        grid = pb.AblationGrid("mini", "rings", [
            pb.AblationCell("broken", dict(layers=9)),
            pb.AblationCell("tiny", dict(channels=(4, 8, 16, 16), batch=2,
                                         holdout=4, codebook=8, layers=1,
                                         modes=2))])
        _, rows = pb.ablate(grid, seeds=(0,), iters=2, image_size=32)
        assert len(rows) == 2
        assert rows[0].endswith("error: ConfigError")
        assert rows[1].endswith("ok")

    def test_standard_grids_are_well_formed(self):
        t = pb.transformer_grid()
        assert [c.name for c in t.cells] == ["squeeze_expand", "squeeze_single",
                                             "expand_only", "mha", "cnn_only"]
        assert t.task == "corner_cue"
        p = pb.pe_grid()
        assert [c.name for c in p.cells] == ["none", "fixed", "discrete",
                                             "learnable"]
        d = pb.depth_grid()
        assert [c.overrides["layers"] for c in d.cells] == [1, 2, 3, 4]
        for g in (t, p, d):
            for cell in g.cells:
                make_config(task=g.task, **cell.overrides)  # validates
