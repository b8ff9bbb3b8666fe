import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cone import ndgrad as nd
from cone.ndgrad import Tensor


def conv_oracle(x, w, b):
    """Direct nested-loop cross-correlation with zero padding."""
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    out = np.zeros((c_out, h, wd))
    for o in range(c_out):
        for i in range(h):
            for j in range(wd):
                acc = b[o]
                for c in range(c_in):
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < h and 0 <= jj < wd:
                                acc += w[o, c, di, dj] * x[c, ii, jj]
                out[o, i, j] = acc
    return out


def block_mean_oracle(x, k):
    c, h, w = x.shape
    ho, wo = -(-h // k), -(-w // k)
    out = np.zeros((c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, i, j] = x[:, i * k:(i + 1) * k, j * k:(j + 1) * k].mean(axis=(1, 2))
    return out


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).uniform(size=(1, 5, 4)).astype(np.float32)
        w = np.zeros((1, 1, 3, 3), np.float32)
        w[0, 0, 1, 1] = 1
        out = nd.conv3x3(Tensor(x), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_kernel_bias(self):
        out = nd.conv3x3(Tensor(np.ones((2, 3, 3))), Tensor(np.zeros((4, 2, 3, 3))),
                         Tensor(np.full(4, 0.5)))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_matches_nested_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((1, 4, 4))
        w = rng.standard_normal((1, 1, 3, 3))
        b = rng.standard_normal(1)
        out = nd.conv3x3(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, conv_oracle(x.astype(np.float32), w.astype(np.float32),
                                                         b.astype(np.float32)), atol=1e-6)

    def test_multichannel_matches_nested_loops(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.standard_normal((3, 5, 6)), rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(2)
        out = nd.conv3x3(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                         Tensor(b, dtype=np.float64))
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b), atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(nd.ShapeError):
            nd.conv3x3(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))), Tensor(np.ones(1)))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        x, w, b = rng.standard_normal((2, 4, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        r = rng.standard_normal((3, 4, 5))
        err = nd.gradcheck(lambda x_, w_, b_: nd.sum(nd.mul(r, nd.conv3x3(x_, w_, b_))), (x, w, b))
        assert err < 1e-6


class TestRelu:
    def test_values(self):
        np.testing.assert_array_equal(nd.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_nonnegative_unchanged(self):
        x = np.array([0.0, 0.5, 3.0], np.float32)
        np.testing.assert_array_equal(nd.relu(Tensor(x)).data, x)

    def test_subgradient(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        (g,) = nd.backward(nd.sum(nd.relu(x)), [x])
        np.testing.assert_array_equal(g, [0, 1])
        y = Tensor([0.0], requires_grad=True)
        (g0,) = nd.backward(nd.sum(nd.relu(y)), [y])
        assert g0[0] == 0


class TestBatchNorm:
    def test_constant_channel(self):
        s = nd.BatchNormState(1)
        out = nd.batchnorm(Tensor(np.full((1, 3, 3), 0.7)), Tensor([1.0]), Tensor([0.0]), s)
        np.testing.assert_allclose(out.data, 0, atol=1e-6)

    def test_zero_gamma(self):
        s = nd.BatchNormState(2)
        x = np.random.default_rng(0).standard_normal((2, 3, 3))
        out = nd.batchnorm(Tensor(x), Tensor([0.0, 0.0]), Tensor([0.3, -1.0]), s)
        np.testing.assert_allclose(out.data[0], 0.3, atol=1e-7)
        np.testing.assert_allclose(out.data[1], -1.0, atol=1e-7)

    def test_statistics_against_two_pass_oracle(self):
        x = np.random.default_rng(4).standard_normal((2, 3, 3))
        s = nd.BatchNormState(2)
        out = nd.batchnorm(Tensor(x), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), s).data.astype(np.float64)
        for c in range(2):
            vals = out[c].ravel()
            m = sum(vals) / len(vals)
            v = sum((u - m) ** 2 for u in vals) / len(vals)
            assert abs(m) < 1e-6
            # eps regularisation pulls the variance slightly under 1
            xs = x[c].ravel().astype(np.float32).astype(np.float64)
            xm = sum(xs) / len(xs)
            xv = sum((u - xm) ** 2 for u in xs) / len(xs)
            assert v == pytest.approx(xv / (xv + 1e-5), abs=1e-5)

    def test_running_stats(self):
        x = np.random.default_rng(5).standard_normal((1, 4, 4)).astype(np.float32)
        s = nd.BatchNormState(1)
        nd.batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), s)
        assert s.count == 1
        assert s.running_mean[0] == pytest.approx(0.1 * x.mean(), rel=1e-5)
        assert s.running_var[0] == pytest.approx(0.9 + 0.1 * x.var(ddof=1), rel=1e-5)

    def test_infer_requires_stats(self):
        with pytest.raises(RuntimeError):
            nd.batchnorm(Tensor(np.ones((1, 2, 2))), Tensor([1.0]), Tensor([0.0]),
                         nd.BatchNormState(1), mode="infer")

    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(6)
        x, gam, bet = rng.standard_normal((2, 3, 4)), rng.uniform(0.5, 2, 2), rng.standard_normal(2)
        r = rng.standard_normal((2, 3, 4))
        s = nd.BatchNormState(2)
        s.running_mean[:] = [0.1, -0.2]
        s.running_var[:] = [0.8, 1.3]
        s.count = 1
        err = nd.gradcheck(
            lambda x_, g_, b_: nd.sum(nd.mul(r, nd.batchnorm(x_, g_, b_, s, mode))), (x, gam, bet))
        assert err < 1e-5


class TestAvgPool:
    def test_constant(self):
        out = nd.avg_pool(Tensor(np.full((2, 7, 9), 0.25)), 4)
        assert out.shape == (2, 2, 3)
        np.testing.assert_allclose(out.data, 0.25)

    def test_small(self):
        out = nd.avg_pool(Tensor([[[1.0, 2.0], [3.0, 4.0]]]), 2)
        np.testing.assert_array_equal(out.data, [[[2.5]]])

    def test_partial_blocks(self):
        x = np.random.default_rng(7).uniform(size=(1, 17, 17))
        out = nd.avg_pool(Tensor(x, dtype=np.float64), 16)
        assert out.shape == (1, 2, 2)
        np.testing.assert_allclose(out.data, block_mean_oracle(x, 16), atol=1e-12)
        assert out.data[0, 1, 1] == x[0, 16, 16]

    def test_bad_kernel(self):
        with pytest.raises(ValueError):
            nd.avg_pool(Tensor(np.ones((1, 2, 2))), 0)

    def test_gradient(self):
        rng = np.random.default_rng(8)
        r = rng.standard_normal((2, 2, 3))
        err = nd.gradcheck(lambda x: nd.sum(nd.mul(r, nd.avg_pool(x, 3))), rng.uniform(size=(2, 5, 7)))
        assert err < 1e-6


class TestSpatialGradient:
    def test_constant(self):
        gx, gy = nd.spatial_gradient(Tensor(np.full((1, 4, 4), 3.0)))
        assert not gx.data.any() and not gy.data.any()

    def test_ramp(self):
        w = 8
        ramp = np.tile(np.arange(w) / w, (1, 5, 1))
        gx, gy = nd.spatial_gradient(Tensor(ramp, dtype=np.float64))
        np.testing.assert_allclose(gx.data[..., :-1], 1 / w)
        assert not gx.data[..., -1].any()
        assert not gy.data.any()

    def test_elementwise_oracle(self):
        x = np.random.default_rng(9).uniform(size=(1, 5, 5))
        gx, gy = nd.spatial_gradient(Tensor(x, dtype=np.float64))
        for i in range(5):
            for j in range(5):
                ex = x[0, i, j + 1] - x[0, i, j] if j < 4 else 0.0
                ey = x[0, i + 1, j] - x[0, i, j] if i < 4 else 0.0
                assert gx.data[0, i, j] == ex
                assert gy.data[0, i, j] == ey

    def test_gradient(self):
        rng = np.random.default_rng(10)
        r1, r2 = rng.standard_normal((2, 1, 4, 5))

        def fn(x):
            gx, gy = nd.spatial_gradient(x)
            return nd.add(nd.sum(nd.mul(r1, gx)), nd.sum(nd.mul(r2, gy)))

        assert nd.gradcheck(fn, rng.uniform(size=(1, 4, 5))) < 1e-6


class TestBackward:
    def test_sum(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (g,) = nd.backward(nd.sum(x), [x])
        np.testing.assert_array_equal(g, 1)

    def test_sum_of_squares(self):
        xv = np.array([1.0, -2.0, 0.5], np.float32)
        x = Tensor(xv, requires_grad=True)
        (g,) = nd.backward(nd.sum(nd.mul(x, x)), [x])
        np.testing.assert_allclose(g, 2 * xv)

    def test_non_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(nd.ShapeError):
            nd.backward(nd.mul(x, 2.0), [x])

    def test_unreachable_param_gets_zero(self):
        x = Tensor(np.ones(3), requires_grad=True)
        other = Tensor(np.ones((2, 2)), requires_grad=True)
        _, g = nd.backward(nd.sum(x), [x, other])
        assert g.shape == (2, 2) and not g.any()

    def test_accumulates_into_grad(self):
        x = Tensor(np.ones(2), requires_grad=True)
        nd.backward(nd.sum(x))
        nd.backward(nd.sum(x))
        np.testing.assert_array_equal(x.grad, 2)

    def test_composite_against_finite_differences(self):
        rng = np.random.default_rng(12)
        x = rng.uniform(size=(1, 8, 8)).astype(np.float32)
        w = rng.standard_normal((2, 1, 3, 3)).astype(np.float32)
        b = rng.standard_normal(2).astype(np.float32)

        def fn(x_, w_, b_):
            return nd.sum(nd.avg_pool(nd.relu(nd.conv3x3(x_, w_, b_)), 2))

        # central differences are meaningless across the relu kink
        pre = nd.conv3x3(Tensor(x), Tensor(w), Tensor(b)).data
        assert np.abs(pre).min() > 0.01
        assert nd.gradcheck(fn, (x, w, b), h=1e-3) < 1e-3

    def test_linearity(self):
        rng = np.random.default_rng(12)
        x = Tensor(rng.uniform(size=(1, 4, 4)), requires_grad=True)

        def l1(t):
            return nd.sum(nd.square(t))

        def l2(t):
            gx, gy = nd.spatial_gradient(t)
            return nd.mean(nd.absolute(nd.add(gx, gy)))

        (g1,) = nd.backward(l1(x), [x], accumulate=False)
        (g2,) = nd.backward(l2(x), [x], accumulate=False)
        (g,) = nd.backward(nd.add(nd.mul(0.3, l1(x)), nd.mul(-2.0, l2(x))), [x], accumulate=False)
        np.testing.assert_allclose(g, 0.3 * g1 - 2.0 * g2, atol=1e-6)

    def test_broadcasting(self):
        a = Tensor(np.ones((3, 2, 2)), requires_grad=True)
        b = Tensor(np.full((1, 2, 2), 2.0), requires_grad=True)
        ga, gb = nd.backward(nd.sum(nd.div(a, b)), [a, b])
        np.testing.assert_allclose(ga, 0.5)
        np.testing.assert_allclose(gb, -3 / 4)

    @pytest.mark.parametrize("op", ["sub", "mul", "div", "exp", "clamp", "index", "mean"])
    def test_elementwise_ops(self, op):
        rng = np.random.default_rng(13)
        a0, b0 = rng.uniform(0.2, 1.5, (2, 3, 4))
        fns = {
            "sub": lambda a, b: nd.sub(a, b),
            "mul": lambda a, b: nd.mul(a, b),
            "div": lambda a, b: nd.div(a, b),
            "exp": lambda a, b: nd.exp(nd.mul(a, b)),
            "clamp": lambda a, b: nd.clamp(nd.add(a, b), 1.0, 2.2),
            "index": lambda a, b: nd.mul(a[1], b[0]),
            "mean": lambda a, b: nd.mean(nd.mul(a, b), axis=0, keepdims=True),
        }
        r = rng.standard_normal(fns[op](Tensor(a0), Tensor(b0)).shape)
        assert nd.gradcheck(lambda a, b: nd.sum(nd.mul(r, fns[op](a, b))), (a0, b0)) < 1e-6


class TestGradcheck:
    def test_sum_of_squares(self):
        assert nd.gradcheck(lambda x: nd.sum(nd.square(x)), np.array([1.0, 2.0])) < 1e-6

    def test_wrong_gradient_is_flagged(self):
        def doubled_square(x):
            out = x.data ** 2
            return nd.sum(nd.custom("bad_square", out, (x,), lambda g: (4 * g * x.data,)))

        assert nd.gradcheck(doubled_square, np.array([1.0, 2.0])) == pytest.approx(0.5, abs=1e-6)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            nd.gradcheck(lambda x: nd.sum(x), np.ones(2), h=0)


class TestPurityAndShapes:
    def test_forward_deterministic(self):
        rng = np.random.default_rng(14)
        x, w, b = rng.standard_normal((3, 6, 6)), rng.standard_normal((3, 3, 3, 3)), rng.standard_normal(3)
        outs = [nd.avg_pool(nd.relu(nd.conv3x3(Tensor(x), Tensor(w), Tensor(b))), 4).data
                for _ in range(2)]
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_float32_default(self):
        assert Tensor(np.ones(2)).dtype == np.float32
        assert nd.add(Tensor(np.ones(2)), 1.0).dtype == np.float32

    @settings(max_examples=30, deadline=None)
    @given(h=st.integers(1, 9), w=st.integers(1, 9), k=st.integers(1, 5))
    def test_shapes(self, h, w, k):
        x = Tensor(np.ones((2, h, w)))
        assert nd.conv3x3(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3))).shape == (3, h, w)
        assert nd.relu(x).shape == x.shape
        assert nd.batchnorm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), nd.BatchNormState(2)).shape == x.shape
        assert nd.spatial_gradient(x)[0].shape == x.shape
        assert nd.avg_pool(x, k).shape == (2, -(-h // k), -(-w // k))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (1, 4, 4), elements=st.floats(-2, 2)))
    def test_random_graph_gradients(self, x0):
        w = np.linspace(-1, 1, 9).reshape(1, 1, 3, 3)

        def fn(x):
            y = nd.exp(nd.mul(0.5, nd.conv3x3(x, nd.Tensor(w, dtype=np.float64),
                                              nd.Tensor(np.zeros(1), dtype=np.float64))))
            return nd.mean(nd.square(nd.avg_pool(y, 3)))

        assert nd.gradcheck(fn, x0) < 1e-3
