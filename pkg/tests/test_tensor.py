"""Operator tests: forward values against hand or loop oracles, gradients against finite differences."""

import numpy as np
import pytest

from bagnet.errors import ConfigurationError, NumericError, ShapeError, TapeUsageError
from bagnet.gradcheck import finite_diff_check
from bagnet.tensor import (
    INFER,
    TRAIN,
    Tape,
    Tensor,
    activation,
    backward,
    batch_norm,
    broadcast_mul,
    concat_channels,
    conv2d,
    downsample2,
    sigmoid,
    sum_all,
    upsample2,
)

from conftest import make_conv


def conv_loops(x, w, b):
    """Direct sliding-window cross-correlation with zero padding (oracle)."""
    n, ci, h, wd = x.shape
    co, _, k, _ = w.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, co, h, wd))
    for b_ in range(n):
        for o in range(co):
            for i in range(h):
                for j in range(wd):
                    out[b_, o, i, j] = np.sum(xp[b_, :, i:i + k, j:j + k] * w[o]) + b[o]
    return out


def grad_of(build, *tensors):
    """Run ``build`` on a fresh tape and return the gradients of ``tensors``."""
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    return [t.grad.copy() for t in tensors]


class TestTensor:
    def test_rank_enforced(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 3)))

    def test_zero_dim_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 0, 2, 2)))

    def test_integer_input_becomes_float(self):
        t = Tensor(np.ones((1, 1, 2, 2), dtype=np.int64))
        assert t.dtype == np.float32


class TestConv2d:
    def test_zero_input_gives_bias(self):
        p = make_conv(np.random.default_rng(0).normal(size=(2, 1, 3, 3)), bias=[0.25, -1.5])
        out = conv2d(Tensor(np.zeros((1, 1, 3, 3))), p).data
        np.testing.assert_array_equal(out[0, 0], 0.25)
        np.testing.assert_array_equal(out[0, 1], -1.5)

    def test_identity_kernel(self):
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        np.testing.assert_array_equal(conv2d(Tensor(x), make_conv(k)).data, x)

    def test_all_ones_window_sums(self):
        out = conv2d(Tensor(np.ones((1, 1, 3, 3))), make_conv(np.ones((1, 1, 3, 3)))).data[0, 0]
        expected = np.array([[4, 6, 4], [6, 9, 6], [4, 6, 4]], dtype=float)
        np.testing.assert_array_equal(out, expected)

    @pytest.mark.parametrize("k", [1, 3])
    def test_matches_loop_oracle(self, rng, k):
        x = rng.normal(size=(2, 3, 5, 6))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        np.testing.assert_allclose(conv2d(Tensor(x), make_conv(w, b)).data, conv_loops(x, w, b), rtol=1e-12, atol=1e-12)

    def test_channel_mismatch_names_shapes(self):
        p = make_conv(np.ones((2, 3, 3, 3)))
        with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(2, 3, 3, 3\)"):
            conv2d(Tensor(np.ones((1, 2, 4, 4))), p)

    def test_unsupported_kernel(self):
        with pytest.raises(ConfigurationError):
            make_conv(np.ones((1, 1, 5, 5)))

    def test_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        p = make_conv(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
        r = rng.normal(size=(2, 3, 4, 4))

        def f():
            return float((conv2d(x, p).data * r).sum())

        gx, gw, gb = grad_of(lambda: sum_all(broadcast_mul_const(conv2d(x, p), r)), x, p.weight, p.bias)
        tensors = [x, p.weight, p.bias]
        coords = [(0, 5), (0, 17), (1, 0), (1, 30), (2, 1)]
        analytic = [gx.reshape(-1)[5], gx.reshape(-1)[17], gw.reshape(-1)[0], gw.reshape(-1)[30], gb.reshape(-1)[1]]
        assert finite_diff_check(f, tensors, coords, analytic, eps=1e-6) < 1e-6


def broadcast_mul_const(t, r):
    """Multiply by a constant array through the tape (per-channel map repeated)."""
    from bagnet.tensor import record_op

    def vjp(g):
        return (g * r,)

    return record_op("mul_const", t.data * r, (t,), vjp)


class TestBatchNorm:
    def test_constant_input_gives_beta(self):
        p = make_conv(np.ones((1, 1, 1, 1)), bn=True)
        p.bn_beta.data[...] = 0.3
        out = batch_norm(Tensor(np.full((2, 1, 3, 3), 7.0)), p, TRAIN).data
        np.testing.assert_allclose(out, 0.3, atol=1e-12)

    def test_two_values(self):
        p = make_conv(np.ones((1, 1, 1, 1)), bn=True)
        out = batch_norm(Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1)), p, TRAIN).data.ravel()
        np.testing.assert_allclose(out, [-0.999995, 0.999995], atol=1e-6)
        np.testing.assert_allclose(out, [-1 / np.sqrt(1 + 1e-5), 1 / np.sqrt(1 + 1e-5)], rtol=1e-15)

    def test_normalises(self, rng):
        p = make_conv(np.ones((3, 3, 1, 1)), bn=True)
        out = batch_norm(Tensor(rng.normal(5.0, 3.0, size=(4, 3, 6, 6))), p, TRAIN).data
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-4)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)

    def test_running_stats_momentum(self, rng):
        p = make_conv(np.ones((2, 2, 1, 1)), bn=True)
        x = rng.normal(2.0, 1.5, size=(3, 2, 4, 4))
        batch_norm(Tensor(x), p, TRAIN)
        np.testing.assert_allclose(p.bn_running_mean, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
        np.testing.assert_allclose(p.bn_running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), rtol=1e-12)

    def test_infer_uses_running_stats(self):
        p = make_conv(np.ones((1, 1, 1, 1)), bn=True)
        p.bn_running_mean[:] = 2.0
        p.bn_running_var[:] = 4.0
        out = batch_norm(Tensor(np.full((1, 1, 2, 2), 4.0)), p, INFER).data
        np.testing.assert_allclose(out, 2.0 / np.sqrt(4.0 + 1e-5), rtol=1e-14)
        assert p.bn_running_mean[0] == 2.0

    def test_non_finite_variance(self):
        p = make_conv(np.ones((1, 1, 1, 1)), bn=True)
        x = np.ones((1, 1, 2, 2))
        x[0, 0, 0, 0] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NumericError):
            batch_norm(Tensor(x), p, TRAIN)

    def test_gradients(self, rng):
        p = make_conv(np.ones((2, 2, 1, 1)), bn=True)
        p.bn_gamma.data = rng.normal(1.0, 0.2, size=(1, 2, 1, 1))
        p.bn_beta.data = rng.normal(0.0, 0.2, size=(1, 2, 1, 1))
        x = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        r = rng.normal(size=(2, 2, 3, 3))

        def f():
            return float((batch_norm(x, p, TRAIN).data * r).sum())

        gx, gg, gb = grad_of(lambda: sum_all(broadcast_mul_const(batch_norm(x, p, TRAIN), r)), x, p.bn_gamma, p.bn_beta)
        coords = [(0, 0), (0, 11), (0, 35), (1, 1), (2, 0)]
        analytic = [gx.reshape(-1)[0], gx.reshape(-1)[11], gx.reshape(-1)[35], gg.reshape(-1)[1], gb.reshape(-1)[0]]
        assert finite_diff_check(f, [x, p.bn_gamma, p.bn_beta], coords, analytic, eps=1e-6) < 1e-6


class TestActivation:
    def test_negative_to_zero(self):
        np.testing.assert_array_equal(activation(Tensor(-np.ones((1, 1, 2, 2)))).data, 0.0)

    def test_positive_identity(self):
        x = np.arange(1.0, 5.0).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(activation(Tensor(x)).data, x)

    def test_mixed(self):
        out = activation(Tensor(np.array([-1.0, 0.0, 2.0]).reshape(1, 3, 1, 1))).data.ravel()
        np.testing.assert_array_equal(out, [0.0, 0.0, 2.0])


class TestSigmoid:
    def test_zero(self):
        assert sigmoid(Tensor(np.zeros((1, 1, 1, 1)))).item() == 0.5

    def test_ten(self):
        np.testing.assert_allclose(sigmoid(Tensor(np.full((1, 1, 1, 1), 10.0))).item(), 0.9999546, atol=1e-7)

    def test_symmetry(self, rng):
        x = rng.normal(0, 5, size=(1, 1, 8, 8))
        np.testing.assert_allclose(sigmoid(Tensor(-x)).data, 1 - sigmoid(Tensor(x)).data, atol=1e-15)

    def test_no_overflow(self):
        with np.errstate(over="raise"):
            out = sigmoid(Tensor(np.array([-1000.0, 1000.0]).reshape(1, 2, 1, 1))).data
        assert np.all(np.isfinite(out))


class TestResampling:
    def test_downsample_max(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        np.testing.assert_array_equal(downsample2(Tensor(x), 2).data, [[[[4.0]]]])

    def test_downsample_constant(self):
        np.testing.assert_array_equal(downsample2(Tensor(np.full((1, 2, 8, 8), 3.0)), 4).data, 3.0)

    def test_factor_one_identity(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 4, 4)))
        np.testing.assert_array_equal(downsample2(x, 1).data, x.data)
        np.testing.assert_array_equal(upsample2(x, 1).data, x.data)

    def test_downsample_indivisible(self):
        with pytest.raises(ShapeError):
            downsample2(Tensor(np.ones((1, 1, 6, 6))), 4)

    def test_upsample_blocks(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2)
        expected = [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        np.testing.assert_array_equal(upsample2(Tensor(x), 2).data[0, 0], expected)

    def test_down_after_up_is_identity(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        np.testing.assert_array_equal(downsample2(upsample2(x, 4), 4).data, x.data)

    def test_non_power_of_two(self):
        with pytest.raises(ConfigurationError):
            upsample2(Tensor(np.ones((1, 1, 2, 2))), 3)

    def test_maxpool_gradient_routes_to_first_max(self):
        x = Tensor(np.array([[5.0, 5.0], [1.0, 5.0]]).reshape(1, 1, 2, 2), requires_grad=True)
        (g,) = grad_of(lambda: sum_all(downsample2(x, 2)), x)
        np.testing.assert_array_equal(g[0, 0], [[1.0, 0.0], [0.0, 0.0]])

    def test_upsample_gradient_sums_blocks(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        (g,) = grad_of(lambda: sum_all(upsample2(x, 4)), x)
        np.testing.assert_array_equal(g, 16.0)


class TestConcatAndMul:
    def test_concat_shape(self):
        out = concat_channels(Tensor(np.zeros((1, 32, 16, 16))), Tensor(np.ones((1, 64, 16, 16))))
        assert out.shape == (1, 96, 16, 16)

    def test_concat_order(self, rng):
        a, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(1, 3, 3, 3))
        out = concat_channels(Tensor(a), Tensor(b)).data
        np.testing.assert_array_equal(out[:, 0], a[:, 0])
        np.testing.assert_array_equal(out[:, 2:], b)

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(1, 32, 16, 16\).*\(1, 64, 8, 8\)"):
            concat_channels(Tensor(np.zeros((1, 32, 16, 16))), Tensor(np.zeros((1, 64, 8, 8))))

    @pytest.mark.parametrize("value", [1.0, 0.0, 0.5])
    def test_broadcast_mul_constant_alpha(self, rng, value):
        f = rng.normal(size=(2, 4, 3, 3))
        out = broadcast_mul(Tensor(f), Tensor(np.full((2, 1, 3, 3), value))).data
        np.testing.assert_array_equal(out, f * value)

    def test_broadcast_mul_needs_single_channel(self):
        with pytest.raises(ShapeError):
            broadcast_mul(Tensor(np.ones((1, 4, 3, 3))), Tensor(np.ones((1, 2, 3, 3))))

    def test_broadcast_mul_spatial_mismatch(self):
        with pytest.raises(ShapeError):
            broadcast_mul(Tensor(np.ones((1, 4, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))

    def test_broadcast_mul_alpha_gradient_sums_channels(self, rng):
        f = Tensor(rng.normal(size=(1, 3, 2, 2)), requires_grad=True)
        a = Tensor(rng.random((1, 1, 2, 2)), requires_grad=True)
        gf, ga = grad_of(lambda: sum_all(broadcast_mul(f, a)), f, a)
        np.testing.assert_allclose(ga, f.data.sum(axis=1, keepdims=True), rtol=1e-15)
        np.testing.assert_array_equal(gf, np.broadcast_to(a.data, f.shape))


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([3.0, -1.0]).reshape(1, 2, 1, 1), requires_grad=True)

        def square(t):
            from bagnet.tensor import record_op

            return record_op("square", t.data ** 2, (t,), lambda g: (2 * t.data * g,))

        (g,) = grad_of(lambda: sum_all(square(x)), x)
        np.testing.assert_array_equal(g.ravel(), [6.0, -2.0])

    def test_sigmoid_slope_at_zero(self):
        x = Tensor(np.zeros((1, 1, 1, 1)), requires_grad=True)
        (g,) = grad_of(lambda: sigmoid(x), x)
        assert g.item() == 0.25

    def test_fan_out_accumulates(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0), requires_grad=True)
        (g,) = grad_of(lambda: sum_all(concat_channels(x, x)), x)
        assert g.item() == 2.0

    def test_non_scalar_loss(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape() as tape:
            y = sigmoid(x)
        with pytest.raises(TapeUsageError):
            backward(y, tape)

    def test_loss_from_another_tape(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        with Tape():
            loss = sum_all(x)
        with Tape() as other:
            sum_all(x)
        with pytest.raises(TapeUsageError):
            other.backward(loss)

    def test_replay_is_deterministic(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        p = make_conv(rng.normal(size=(2, 2, 3, 3)), bn=True)
        with Tape() as tape:
            loss = sum_all(sigmoid(batch_norm(conv2d(x, p), p)))
        tape.backward(loss)
        first = [x.grad.copy(), p.weight.grad.copy()]
        tape.backward(loss)
        np.testing.assert_array_equal(first[0], x.grad)
        np.testing.assert_array_equal(first[1], p.weight.grad)

    def test_no_tape_records_nothing(self):
        x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
        y = sigmoid(x)
        assert not y.requires_grad
