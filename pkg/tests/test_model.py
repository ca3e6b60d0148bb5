import numpy as np
import pytest

from segtran import ConfigError, ParamStore, Tensor
from segtran import autodiff as ad
from segtran.config import make_config
from segtran.model import (SegtranModel, backbone_forward, build_backbone,
                           build_model)


def _img(rng, *shape):
    return Tensor(rng.uniform(0.0, 1.0, shape).astype(np.float32))


class TestBackbone:
    def test_four_scales(self):
        rng = np.random.default_rng(0)
        store = ParamStore(np.random.default_rng(1))
        bb = build_backbone(store, 1, (4, 8, 16, 16))
        feats = backbone_forward(_img(rng, 1, 64, 64), bb)
        assert [f.shape for f in feats] == [
            (4, 32, 32), (8, 16, 16), (16, 8, 8), (16, 4, 4)]

    def test_batched(self):
        rng = np.random.default_rng(2)
        store = ParamStore(np.random.default_rng(3))
        bb = build_backbone(store, 1, (4, 8, 16, 16))
        feats = backbone_forward(_img(rng, 2, 1, 32, 32), bb)
        assert feats[-1].shape == (2, 16, 2, 2)

    def test_extent_not_multiple_of_16(self):
        store = ParamStore(np.random.default_rng(4))
        bb = build_backbone(store, 1, (4, 8, 16, 16))
        with pytest.raises(ConfigError, match="width"):
            backbone_forward(Tensor(np.zeros((1, 64, 40), np.float32)), bb)


class TestForward:
    def test_logits_shape_default(self):
        cfg = make_config()
        model = build_model(cfg, seed=0)
        rng = np.random.default_rng(5)
        out = model.forward(_img(rng, 2, 1, 64, 64))
        assert out.shape == (2, 3, 64, 64)
        assert out.data.dtype == np.float32

    def test_unbatched(self):
        cfg = make_config(image_size=32, channels=(4, 8, 16, 16), codebook=8)
        model = build_model(cfg, seed=0)
        rng = np.random.default_rng(6)
        out = model.forward(_img(rng, 1, 32, 32))
        assert out.shape == (3, 32, 32)

    @pytest.mark.parametrize("transformer", ["squeeze_expand", "squeeze_single",
                                             "expand_only", "mha"])
    def test_each_transformer_variant(self, transformer):
        cfg = make_config(image_size=32, channels=(4, 8, 16, 16), layers=1,
                          modes=2, codebook=4, heads=2, transformer=transformer)
        model = build_model(cfg, seed=0)
        rng = np.random.default_rng(7)
        out = model.forward(_img(rng, 1, 32, 32))
        assert out.shape == (3, 32, 32)
        assert np.isfinite(out.data).all()

    def test_cnn_only_has_no_transformer_params(self):
        cfg = make_config(image_size=32, channels=(4, 8, 16, 16), cnn_only=True)
        model = build_model(cfg, seed=0)
        assert model.layers == []
        assert model.store.count("transformer") == 0
        assert model.store.count("pe") == 0
        rng = np.random.default_rng(8)
        out = model.forward(_img(rng, 1, 32, 32))
        assert out.shape == (3, 32, 32)

    def test_wrong_input_size_rejected(self):
        cfg = make_config(image_size=64)
        model = build_model(cfg, seed=0)
        with pytest.raises(ConfigError, match="64x64"):
            model.forward(Tensor(np.zeros((1, 32, 32), np.float32)))

    def test_same_seed_same_weights_and_logits(self):
        cfg = make_config(image_size=32, channels=(4, 8, 16, 16), codebook=8)
        a = build_model(cfg, seed=3)
        b = build_model(cfg, seed=3)
        for (na, ta), (nb, tb) in zip(a.store, b.store):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)
        rng = np.random.default_rng(9)
        x = _img(rng, 1, 32, 32)
        assert np.array_equal(a.forward(x).data, b.forward(x).data)

    def test_different_seed_different_weights(self):
        cfg = make_config(image_size=32, channels=(4, 8, 16, 16))
        a = build_model(cfg, seed=0)
        b = build_model(cfg, seed=1)
        assert not np.array_equal(a.store.get("head.w").data,
                                  b.store.get("head.w").data)


class TestPipelinePieces:
    def _model(self, pe="learnable"):
        cfg = make_config(image_size=32, channels=(4, 8, 16, 16), pe=pe)
        return build_model(cfg, seed=0)

    def test_input_fpn_is_upsample_plus_projection(self):
        model = self._model()
        rng = np.random.default_rng(10)
        f3 = _img(rng, 16, 4, 4)
        f4 = _img(rng, 16, 2, 2)
        got = model.input_fpn(f3, f4).data
        up = ad.upsample_bilinear(f4, 2).data
        proj = ad.conv2d(f3, model.conv34.w).data \
            + model.conv34.b.data[:, None, None]
        np.testing.assert_allclose(got, up + proj, rtol=1e-6)

    def test_flatten_is_row_major(self):
        model = self._model(pe="none")
        rng = np.random.default_rng(11)
        f34 = _img(rng, 16, 4, 4)
        x = model.flatten_with_pe(f34)
        assert x.shape == (16, 16)
        for r, c in [(0, 0), (1, 3), (3, 2)]:
            np.testing.assert_array_equal(x.data[r * 4 + c], f34.data[:, r, c])

    def test_flatten_adds_encoding(self):
        model = self._model(pe="learnable")
        rng = np.random.default_rng(12)
        f34 = _img(rng, 16, 4, 4)
        x = model.flatten_with_pe(f34).data
        enc = model.pe.encode(4, 4).data
        base = np.swapaxes(f34.data.reshape(16, 16), 0, 1)
        np.testing.assert_allclose(x, base + enc, rtol=1e-6)

    def test_unflatten_inverts_flatten(self):
        model = self._model(pe="none")
        rng = np.random.default_rng(13)
        f34 = _img(rng, 2, 16, 4, 4)
        x = model.flatten_with_pe(f34)
        back = model.unflatten(x, 4, 4)
        np.testing.assert_array_equal(back.data, f34.data)

    def test_head_output_is_twice_its_input(self):
        model = self._model()
        rng = np.random.default_rng(14)
        g = _img(rng, 16, 16, 16)
        assert model.seg_head(g).shape == (3, 32, 32)


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self):
        cfg = make_config(image_size=32, channels=(2, 3, 4, 4), layers=1,
                          modes=2, codebook=3)
        model = build_model(cfg, seed=0)
        rng = np.random.default_rng(15)
        with ad.Tape() as tape:
            out = model.forward(_img(rng, 1, 32, 32))
            loss = ad.tsum(ad.mul(out, ad.constant(
                rng.standard_normal(out.shape).astype(np.float32))))
            tape.backward(loss)
        missing = [name for name, p in model.store if p.grad is None
                   or not np.abs(p.grad).any()]
        assert missing == []
