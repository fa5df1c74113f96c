import numpy as np
import pytest

from opsr import layers as L
from opsr.tensor_ops import Rng, conv2d_forward


def fd_layer_param_check(layer, x, param, idx, h=1e-6):
    """Central finite difference of sum(forward(x) * go) wrt one parameter
    coordinate, compared with the analytic gradient."""
    go = np.random.default_rng(0).normal(size=layer.forward(x, training=True).shape)
    layer.forward(x, training=True)
    layer.backward(go)
    analytic = param.grad[idx]
    orig = param.value[idx]
    param.value[idx] = orig + h
    lp = (layer.forward(x, training=True) * go).sum()
    param.value[idx] = orig - h
    lm = (layer.forward(x, training=True) * go).sum()
    param.value[idx] = orig
    fd = (lp - lm) / (2 * h)
    return abs(analytic - fd) / max(abs(fd), 1e-6)


def fd_layer_input_check(layer, x, idx, h=1e-6):
    go = np.random.default_rng(0).normal(size=layer.forward(x, training=True).shape)
    layer.forward(x, training=True)
    grad = layer.backward(go)
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    lp = (layer.forward(xp, training=True) * go).sum()
    lm = (layer.forward(xm, training=True) * go).sum()
    fd = (lp - lm) / (2 * h)
    return abs(grad[idx] - fd) / max(abs(fd), 1e-6)


class TestOpConv2d:
    def test_q1_equals_plain_convolution(self, rng):
        """With Q=1 the operational layer is exactly a standard convolution:
        same forward output, same gradients."""
        layer = L.OpConv2d(3, 4, (3, 3), q=1, rng=Rng(0))
        x = rng.normal(size=(2, 3, 10, 10)).astype(np.float32)
        out = layer.forward(x)
        plain = conv2d_forward(x, layer.weights.value, layer.bias.value)
        assert np.abs(out - plain).max() <= 1e-6

        go = rng.normal(size=out.shape).astype(np.float32)
        gi = layer.backward(go)
        from opsr.tensor_ops import conv2d_backward
        gi_ref, gw_ref, gb_ref = conv2d_backward(x, layer.weights.value, go)
        assert np.abs(gi - gi_ref).max() <= 1e-6
        assert np.abs(layer.weights.grad - gw_ref).max() <= 1e-6
        assert np.abs(layer.bias.grad - gb_ref).max() <= 1e-6

    def test_q3_weight_shape_and_count(self):
        layer = L.OpConv2d(5, 7, (3, 3), q=3, rng=Rng(0))
        assert layer.weights.value.shape == (7, 15, 3, 3)
        assert layer.num_params() == (3 * 3 * 5 * 3 + 1) * 7

    def test_q3_input_gradient(self, rng):
        layer = L.OpConv2d(2, 3, (3, 3), q=3, rng=Rng(1))
        layer.weights.value = layer.weights.value.astype(np.float64)
        layer.bias.value = layer.bias.value.astype(np.float64)
        x = rng.normal(size=(1, 2, 8, 8))
        assert fd_layer_input_check(layer, x, (0, 1, 4, 4)) < 1e-6

    def test_zero_init_without_rng(self):
        layer = L.OpConv2d(2, 2, (3, 3), q=2, rng=None)
        assert not layer.weights.value.any()


class TestActivations:
    def test_relu_forward_and_mask(self, rng):
        layer = L.Relu()
        x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
        out = layer.forward(x)
        assert np.array_equal(out, np.maximum(x, 0))
        go = rng.normal(size=x.shape).astype(np.float32)
        gi = layer.backward(go)
        assert np.array_equal(gi, np.where(x > 0, go, 0))

    def test_tanh_range(self, rng):
        layer = L.Tanh()
        out = layer.forward(rng.normal(size=(100,)) * 10)
        assert out.min() >= -1 and out.max() <= 1


class TestNorms:
    @pytest.mark.parametrize("kind", ["batch", "instance", "l1", "l2"])
    def test_input_gradient_finite_differences(self, rng, kind):
        layer = L.make_norm(kind, 3)
        x = rng.normal(size=(2, 3, 6, 6)) + 0.3
        for idx in [(0, 0, 0, 0), (1, 2, 3, 3)]:
            assert fd_layer_input_check(layer, x, idx) < 1e-5

    def test_batchnorm_param_gradients(self, rng):
        layer = L.BatchNorm(3)
        layer.scale.value = layer.scale.value.astype(np.float64)
        layer.shift.value = layer.shift.value.astype(np.float64)
        x = rng.normal(size=(2, 3, 6, 6))
        assert fd_layer_param_check(layer, x, layer.scale, (1,)) < 1e-6
        assert fd_layer_param_check(layer, x, layer.shift, (2,)) < 1e-6

    def test_batchnorm_training_output_standardized(self, rng):
        layer = L.BatchNorm(4)
        x = rng.normal(size=(3, 4, 8, 8)) * 3 + 5
        out = layer.forward(x, training=True)
        assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.std(axis=(0, 2, 3)) - 1).max() < 1e-3

    def test_batchnorm_running_stats_move(self, rng):
        layer = L.BatchNorm(2)
        x = rng.normal(size=(2, 2, 4, 4)) + 10
        layer.forward(x, training=True)
        assert layer.running_mean.mean() > 0.5
        # inference mode uses the running stats, not batch stats
        out = layer.forward(x, training=False)
        assert abs(out.mean()) > 1.0

    def test_batchnorm_param_count(self):
        assert L.BatchNorm(64).num_params() == 128

    def test_instancenorm_standardizes_each_sample(self, rng):
        layer = L.InstanceNorm(2)
        x = rng.normal(size=(3, 2, 8, 8)) * 2 + 1
        out = layer.forward(x)
        assert np.abs(out.mean(axis=(2, 3))).max() < 1e-6
        assert layer.num_params() == 0

    def test_l1_norm_scale(self, rng):
        layer = L.L1Norm(2)
        x = rng.normal(size=(2, 2, 4, 4))
        out = layer.forward(x)
        d = np.abs(x).mean(axis=(1, 2, 3), keepdims=True) + layer.eps
        assert np.abs(out - x / d).max() < 1e-6

    def test_l2_norm_scale(self, rng):
        layer = L.L2Norm(2)
        x = rng.normal(size=(2, 2, 4, 4))
        out = layer.forward(x)
        rms = np.sqrt((x ** 2).mean(axis=(1, 2, 3), keepdims=True))
        assert np.abs(out - x / (rms + layer.eps)).max() < 1e-5

    def test_factory(self):
        assert L.make_norm("none", 4) is None
        assert isinstance(L.make_norm("batch", 4), L.BatchNorm)
        with pytest.raises(ValueError):
            L.make_norm("spectral", 4)
