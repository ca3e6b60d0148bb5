import numpy as np
import pytest

from segtran import Tape, Tensor, ShapeError, UsageError
from segtran import autodiff as ad
from segtran import gradcases


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        m = Tensor(rng.standard_normal((2, 2)), dtype=np.float64)
        out = ad.matmul(Tensor(np.eye(2), dtype=np.float64), m)
        np.testing.assert_array_equal(out.data, m.data)

    def test_hand_value(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], dtype=np.float64)
        b = Tensor([[1.0], [1.0]], dtype=np.float64)
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        a = Tensor(np.zeros((3, 5)))
        b = Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError) as exc:
            ad.matmul(a, b)
        assert "(3, 5)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_associativity_single(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a, b, c = (Tensor(rng.standard_normal((8, 8)).astype(np.float32))
                       for _ in range(3))
            left = ad.matmul(ad.matmul(a, b), c).data
            right = ad.matmul(a, ad.matmul(b, c)).data
            np.testing.assert_allclose(left, right, rtol=1e-4, atol=1e-4)

    def test_batched_broadcast(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        b = Tensor(rng.standard_normal((5, 3, 2)), dtype=np.float64)
        out = ad.matmul(a, b)
        assert out.shape == (5, 4, 2)
        for i in range(5):
            np.testing.assert_allclose(out.data[i], a.data @ b.data[i], rtol=1e-12)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax(Tensor([0.0, 0.0], dtype=np.float64), axis=0)
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_large_values_no_overflow(self):
        out = ad.softmax(Tensor([1000.0, 1000.0, 1000.0], dtype=np.float64), axis=0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=1e-12)

    def test_reference_values(self):
        out = ad.softmax(Tensor([1.0, 2.0, 3.0], dtype=np.float64), axis=0)
        x = np.array([1.0, 2.0, 3.0])
        ref = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
        np.testing.assert_allclose(out.data, ref, rtol=1e-15)
        # frozen values from an independent double-precision evaluation
        np.testing.assert_allclose(
            out.data,
            [0.09003057317038046, 0.24472847105479767, 0.6652409557748219],
            rtol=1e-12)

    @pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-6), (np.float64, 1e-12)])
    def test_rows_sum_to_one(self, dtype, tol):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(1000):
            scale = rng.choice([1.0, 10.0, 1e4])
            x = Tensor((rng.standard_normal(5) * scale).astype(dtype))
            s = ad.softmax(x, axis=0).data.sum()
            worst = max(worst, abs(float(s) - 1.0))
        assert worst <= tol


def conv2d_loop_oracle(x, k, stride, pad):
    """Quadruple-loop cross-correlation; accumulation order (ci, u, v)."""
    b, cin, h, w = x.shape
    cout, _, ks, _ = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - ks) // stride + 1
    wo = (w + 2 * pad - ks) // stride + 1
    out = np.zeros((b, cout, ho, wo), dtype=np.result_type(x.dtype, k.dtype))
    for bi in range(b):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = out.dtype.type(0)
                    for ci in range(cin):
                        for u in range(ks):
                            for v in range(ks):
                                acc += xp[bi, ci, i * stride + u, j * stride + v] \
                                    * k[co, ci, u, v]
                    out[bi, co, i, j] = acc
    return out


class TestConv2d:
    def test_unit_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((1, 5, 5)), dtype=np.float64)
        k = Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64)
        np.testing.assert_array_equal(ad.conv2d(x, k).data, x.data)

    def test_averaging_kernel_constant_interior(self):
        x = Tensor(np.full((1, 6, 6), 3.5), dtype=np.float64)
        k = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0), dtype=np.float64)
        out = ad.conv2d(x, k, stride=1, pad=1).data
        np.testing.assert_allclose(out[0, 1:-1, 1:-1], 3.5, rtol=1e-12)

    def test_strided_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((1, 2, 5, 5))
        k = rng.standard_normal((3, 2, 3, 3))
        out = ad.conv2d(Tensor(x, dtype=np.float64),
                        Tensor(k, dtype=np.float64), stride=2).data
        np.testing.assert_allclose(out, conv2d_loop_oracle(x, k, 2, 0), rtol=1e-12)

    def test_exact_against_loop_oracle_double(self):
        # bitwise agreement depends on the fixed accumulation order
        rng = np.random.default_rng(99)
        for _ in range(50):
            b = int(rng.integers(1, 3))
            cin = int(rng.integers(1, 4))
            cout = int(rng.integers(1, 4))
            ks = int(rng.choice([1, 3]))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            h = int(rng.integers(ks, 7))
            w = int(rng.integers(ks, 7))
            x = rng.standard_normal((b, cin, h, w))
            k = rng.standard_normal((cout, cin, ks, ks))
            ours = ad.conv2d(Tensor(x, dtype=np.float64),
                             Tensor(k, dtype=np.float64), stride, pad).data
            oracle = conv2d_loop_oracle(x, k, stride, pad)
            assert np.array_equal(ours, oracle)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError) as exc:
            ad.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))
        assert "5" in str(exc.value)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def upsample_formula_oracle(x, f):
    """Per-pixel evaluation of the half-pixel-center mapping with clamping."""
    c, h, w = x.shape
    out = np.zeros((c, f * h, f * w), dtype=x.dtype)
    for ci in range(c):
        for i in range(f * h):
            for j in range(f * w):
                sy = (i + 0.5) / f - 0.5
                sx = (j + 0.5) / f - 0.5
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                wy, wx = sy - y0, sx - x0
                y0c = min(max(y0, 0), h - 1)
                y1c = min(max(y0 + 1, 0), h - 1)
                x0c = min(max(x0, 0), w - 1)
                x1c = min(max(x0 + 1, 0), w - 1)
                out[ci, i, j] = ((1 - wy) * (1 - wx) * x[ci, y0c, x0c]
                                 + (1 - wy) * wx * x[ci, y0c, x1c]
                                 + wy * (1 - wx) * x[ci, y1c, x0c]
                                 + wy * wx * x[ci, y1c, x1c])
    return out


class TestUpsample:
    def test_constant_map(self):
        x = Tensor(np.full((3, 4, 4), 2.25), dtype=np.float64)
        out = ad.upsample_bilinear(x, 2)
        assert out.shape == (3, 8, 8)
        np.testing.assert_allclose(out.data, 2.25, rtol=1e-12)

    def test_single_pixel(self):
        x = Tensor(np.array([[[7.0]]]), dtype=np.float64)
        out = ad.upsample_bilinear(x, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 7.0))

    def test_formula_oracle_2x2(self):
        x = np.array([[[0.0, 1.0], [2.0, 3.0]]])
        out = ad.upsample_bilinear(Tensor(x, dtype=np.float64), 2).data
        np.testing.assert_allclose(out, upsample_formula_oracle(x, 2), rtol=1e-12)

    def test_formula_oracle_random(self):
        rng = np.random.default_rng(21)
        for f in (2, 4):
            x = rng.standard_normal((2, 3, 5))
            out = ad.upsample_bilinear(Tensor(x, dtype=np.float64), f).data
            np.testing.assert_allclose(out, upsample_formula_oracle(x, f),
                                       rtol=1e-12, atol=1e-12)

    def test_bad_factor(self):
        with pytest.raises(UsageError):
            ad.upsample_bilinear(Tensor(np.zeros((1, 2, 2))), 3)


class TestBackward:
    def test_identity_gradient(self):
        x = Tensor(np.array([1.0, 2.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            pass
        tape.backward(x, np.ones(2))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            loss = ad.tsum(ad.mul(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data, rtol=1e-12)

    def test_reuse_sums_contributions(self):
        x = Tensor(np.array([3.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            y = ad.tsum(ad.add(ad.mul(x, x), x))  # x^2 + x
        tape.backward(y)
        np.testing.assert_allclose(x.grad, [7.0], rtol=1e-12)

    def test_seed_not_on_tape(self):
        x = Tensor(np.zeros(3))
        with Tape() as tape:
            pass
        with pytest.raises(UsageError):
            tape.backward(x)

    def test_nonscalar_seed_needs_cotangent(self):
        x = Tensor(np.zeros(3), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_explicit_cotangent(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), dtype=np.float64, requires_grad=True)
        with Tape() as tape:
            y = ad.mul(x, x)
        cot = np.array([1.0, 0.0, 2.0])
        tape.backward(y, cot)
        np.testing.assert_allclose(x.grad, 2 * x.data * cot, rtol=1e-12)

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor(np.array([2.0]), dtype=np.float64, requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = ad.tsum(ad.mul(x, x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [8.0], rtol=1e-12)


class TestGradCheck:
    def test_quadratic_form(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 4))
        x = Tensor(rng.standard_normal((4, 1)), dtype=np.float64,
                   requires_grad=True, name="x")

        def f(ps):
            xx = ps[0][1]
            return ad.tsum(ad.matmul(ad.transpose2(xx),
                                     ad.matmul(ad.constant(a, np.float64), xx)))

        report = ad.grad_check(f, [("x", x)])
        assert report["x"].max_rel_err < 1e-8
        # reverse-mode gradient agrees with the closed form (A + A^T) x
        with Tape() as tape:
            loss = f([("x", x)])
        x.grad = None
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, (a + a.T) @ x.data, rtol=1e-9)

    def test_softmax_cross_entropy_layer(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.standard_normal((3, 5)) * 0.5, dtype=np.float64,
                   requires_grad=True, name="w")
        x = rng.standard_normal((2, 3))
        labels = np.array([1, 4])

        def f(ps):
            logits = ad.matmul(ad.constant(x, np.float64), ps[0][1])
            logp = ad.log_softmax(logits, axis=-1)
            picked = ad.mul(logp, ad.constant(np.eye(5)[labels]))
            return ad.neg(ad.tmean(ad.tsum(picked, axis=-1)))

        report = ad.grad_check(f, [("w", w)])
        assert report["w"].max_rel_err < 1e-6

    def test_zero_function(self):
        x = Tensor(np.ones(3), dtype=np.float64, requires_grad=True, name="x")

        def f(ps):
            return ad.tsum(ad.mul(ps[0][1], ad.constant(np.zeros(3), np.float64)))

        report = ad.grad_check(f, [("x", x)])
        assert report["x"].max_rel_err == 0.0
        assert report["x"].mean_rel_err == 0.0

    def test_rejects_single_precision(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(UsageError):
            ad.grad_check(lambda ps: ad.tsum(ps[0][1]), [("x", x)])


@pytest.mark.parametrize("op", sorted(gradcases.CASES))
def test_op_gradients_match_finite_differences(op):
    assert gradcases.run_case(op) < 1e-4


class TestDeterminismAndDtype:
    def test_forward_rerun_bitwise_identical(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
        k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

        def run():
            t = ad.conv2d(Tensor(x), Tensor(k), stride=1, pad=1)
            t = ad.silu(t)
            t = ad.upsample_bilinear(t, 2)
            return ad.softmax(ad.reshape(t, (2, 4 * 16 * 16)), axis=-1).data

        first, second = run(), run()
        assert np.array_equal(first, second)

    def test_mixed_precision_promotes(self):
        a = Tensor(np.ones(3, dtype=np.float32))
        b = Tensor(np.ones(3, dtype=np.float64))
        assert ad.add(a, b).data.dtype == np.float64

    def test_default_dtype_is_single(self):
        assert Tensor([1.0, 2.0]).data.dtype == np.float32

    def test_debug_finiteness_check(self):
        ad.set_debug_checks(True)
        try:
            with np.errstate(divide="ignore"), pytest.raises(Exception):
                ad.div(Tensor(np.ones(2), dtype=np.float64),
                       Tensor(np.zeros(2), dtype=np.float64))
        finally:
            ad.set_debug_checks(False)


class TestLayerNorm:
    def test_standardizes_last_axis(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((4, 16)) * 3 + 1, dtype=np.float64)
        g = Tensor(np.ones(16), dtype=np.float64)
        b = Tensor(np.zeros(16), dtype=np.float64)
        out = ad.layer_norm(x, g, b).data
        np.testing.assert_allclose(out.mean(axis=-1), 0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=-1), 1, rtol=1e-4)

    def test_gain_bias_applied(self):
        x = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]), dtype=np.float64)
        g = Tensor(np.full(4, 2.0), dtype=np.float64)
        b = Tensor(np.full(4, 5.0), dtype=np.float64)
        base = ad.layer_norm(x, Tensor(np.ones(4), dtype=np.float64),
                             Tensor(np.zeros(4), dtype=np.float64)).data
        out = ad.layer_norm(x, g, b).data
        np.testing.assert_allclose(out, 2 * base + 5, rtol=1e-12)


class TestTakeRows:
    def test_lookup(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), dtype=np.float64)
        out = ad.take_rows(table, np.array([2, 0]))
        np.testing.assert_array_equal(out.data, table.data[[2, 0]])

    def test_out_of_range(self):
        table = Tensor(np.zeros((4, 3)))
        with pytest.raises(UsageError):
            ad.take_rows(table, np.array([4]))

    def test_repeated_indices_accumulate(self):
        table = Tensor(np.zeros((3, 2)), dtype=np.float64, requires_grad=True)
        idx = np.array([1, 1, 2])
        with Tape() as tape:
            rows = ad.take_rows(table, idx)
            loss = ad.tsum(rows)
        tape.backward(loss)
        np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [1, 1]])
