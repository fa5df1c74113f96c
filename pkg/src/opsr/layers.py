"""Differentiable layers: plain/operational convolution, activations, and
the four normalization variants.

Every layer exposes forward(x, training) / backward(grad_output) and a
params() iterator over its learnable Param objects. backward() stores the
parameter gradients on the Params and returns the gradient wrt the layer
input. Layers cache whatever the backward pass needs, so a backward call
must follow the matching forward call.

The operational convolution (generative neuron) applies a plain convolution
to the channel-concatenated powers [x^1 ... x^Q] of its input, so each
kernel element acts as a learnable Q-term polynomial. Q=1 reduces it exactly
to a standard convolution.
"""

import numpy as np

from . import tensor_ops as T


class Param:
    """A learnable tensor plus its gradient slot."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = None


class OpConv2d:
    """Operational (Self-ONN) convolution; a plain convolution when q=1.

    weights: [out_channels, in_channels*q, Kh, Kw] with power blocks ordered
    [x^1 ... x^Q] along the input-channel axis. The bias is the polynomial's
    constant term.
    """

    def __init__(self, in_channels, out_channels, kernel, q=1, gain=0.02, rng=None):
        if q < 1:
            raise ValueError(f"q must be >= 1, got {q}")
        kh, kw = kernel
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = (kh, kw)
        self.q = q
        wshape = (out_channels, in_channels * q, kh, kw)
        if rng is not None:
            w = T.randn_init(wshape, gain, rng)
        else:
            w = np.zeros(wshape, dtype=np.float32)
        self.weights = Param("weights", w)
        self.bias = Param("bias", np.zeros(out_channels, dtype=np.float32))
        self._x = None
        self._xq = None
        self._cache = {}

    def num_params(self):
        return self.weights.value.size + self.bias.value.size

    def params(self):
        return [self.weights, self.bias]

    def forward(self, x, training=False):
        if x.shape[1] != self.in_channels:
            raise ValueError(
                f"layer expects {self.in_channels} input channels, got {x.shape[1]}"
            )
        self._x = x
        self._xq = T.power_expand(x, self.q) if self.q > 1 else x
        self._cache = {}
        return T.conv2d_forward(self._xq, self.weights.value, self.bias.value,
                                cache=self._cache)

    def backward(self, grad_output, need_input_grad=True):
        x = self._x
        grad_xq, gw, gb = T.conv2d_backward(
            self._xq, self.weights.value, grad_output,
            cache=self._cache, need_grad_input=need_input_grad)
        self.weights.grad = gw
        self.bias.grad = gb
        if not need_input_grad:
            return None
        if self.q > 1:
            return T.power_expand_backward(x, self.q, grad_xq)
        return grad_xq


class Tanh:
    def __init__(self):
        self._y = None

    def num_params(self):
        return 0

    def params(self):
        return []

    def forward(self, x, training=False):
        self._y = T.tanh_forward(x)
        return self._y

    def backward(self, grad_output):
        return T.tanh_backward(self._y, grad_output)


class Relu:
    def __init__(self):
        self._mask = None

    def num_params(self):
        return 0

    def params(self):
        return []

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, x.dtype.type(0))

    def backward(self, grad_output):
        return np.where(self._mask, grad_output, grad_output.dtype.type(0))


class BatchNorm:
    """Per-channel standardization over (B,H,W) with learnable scale/shift.

    Training mode uses batch statistics and updates running estimates
    (momentum 0.1, unbiased running variance); inference mode uses the
    running estimates. Contributes 2*channels learnable parameters.
    """

    kind = "batch"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.scale = Param("scale", np.ones(channels, dtype=np.float32))
        self.shift = Param("shift", np.zeros(channels, dtype=np.float32))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self._cache = None

    def num_params(self):
        return 2 * self.channels

    def params(self):
        return [self.scale, self.shift]

    def forward(self, x, training=False):
        dtype = x.dtype
        if training:
            mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
            var = x.var(axis=(0, 2, 3), dtype=np.float64)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            m = self.momentum
            unbiased = var * n / max(n - 1, 1)
            self.running_mean = ((1 - m) * self.running_mean + m * mean).astype(np.float32)
            self.running_var = ((1 - m) * self.running_var + m * unbiased).astype(np.float32)
        else:
            mean = self.running_mean.astype(np.float64)
            var = self.running_var.astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = ((x - mean[None, :, None, None]) * inv_std[None, :, None, None]).astype(dtype)
        self._cache = (xhat, inv_std.astype(dtype), training)
        s = self.scale.value.astype(dtype)
        b = self.shift.value.astype(dtype)
        return xhat * s[None, :, None, None] + b[None, :, None, None]

    def backward(self, grad_output):
        xhat, inv_std, training = self._cache
        axes = (0, 2, 3)
        self.scale.grad = (grad_output * xhat).sum(axis=axes).astype(self.scale.value.dtype)
        self.shift.grad = grad_output.sum(axis=axes).astype(self.shift.value.dtype)
        s = self.scale.value.astype(grad_output.dtype)
        g = grad_output * s[None, :, None, None]
        if not training:
            return g * inv_std[None, :, None, None]
        n = grad_output.shape[0] * grad_output.shape[2] * grad_output.shape[3]
        g_mean = g.mean(axis=axes, keepdims=True)
        gx_mean = (g * xhat).mean(axis=axes, keepdims=True)
        return inv_std[None, :, None, None] * (g - g_mean - xhat * gx_mean)


class InstanceNorm:
    """Per-(sample, channel) standardization over (H,W); no learnable params."""

    kind = "instance"

    def __init__(self, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self._cache = None

    def num_params(self):
        return 0

    def params(self):
        return []

    def forward(self, x, training=False):
        mean = x.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
        var = x.var(axis=(2, 3), keepdims=True, dtype=np.float64)
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = ((x - mean) * inv_std).astype(x.dtype)
        self._cache = (xhat, inv_std)
        return xhat

    def backward(self, grad_output):
        xhat, inv_std = self._cache
        axes = (2, 3)
        g_mean = grad_output.mean(axis=axes, keepdims=True)
        gx_mean = (grad_output * xhat).mean(axis=axes, keepdims=True)
        return inv_std * (grad_output - g_mean - xhat * gx_mean)


class L1Norm:
    """Per-sample division by (mean |x| over (C,H,W)) + eps; no parameters."""

    kind = "l1"

    def __init__(self, channels, eps=1e-8):
        self.channels = channels
        self.eps = eps
        self._cache = None

    def num_params(self):
        return 0

    def params(self):
        return []

    def forward(self, x, training=False):
        d = np.abs(x).mean(axis=(1, 2, 3), keepdims=True, dtype=np.float64) + self.eps
        d = d.astype(x.dtype)
        self._cache = (x, d)
        return x / d

    def backward(self, grad_output):
        x, d = self._cache
        n = x.shape[1] * x.shape[2] * x.shape[3]
        gx_sum = (grad_output * x).sum(axis=(1, 2, 3), keepdims=True)
        return grad_output / d - gx_sum / (d * d) * np.sign(x) / n


class L2Norm:
    """Per-sample division by (RMS over (C,H,W)) + eps; no parameters."""

    kind = "l2"

    def __init__(self, channels, eps=1e-8):
        self.channels = channels
        self.eps = eps
        self._cache = None

    def num_params(self):
        return 0

    def params(self):
        return []

    def forward(self, x, training=False):
        rms = np.sqrt((x.astype(np.float64) ** 2).mean(axis=(1, 2, 3), keepdims=True))
        rms = np.maximum(rms, self.eps).astype(x.dtype)
        d = rms + x.dtype.type(self.eps)
        self._cache = (x, rms, d)
        return x / d

    def backward(self, grad_output):
        x, rms, d = self._cache
        n = x.shape[1] * x.shape[2] * x.shape[3]
        gx_sum = (grad_output * x).sum(axis=(1, 2, 3), keepdims=True)
        return grad_output / d - gx_sum / (d * d) * x / (n * rms)


NORM_KINDS = ("none", "batch", "instance", "l1", "l2")


def make_norm(kind, channels):
    """Normalization factory; returns None for kind 'none'."""
    if kind == "none":
        return None
    if kind == "batch":
        return BatchNorm(channels)
    if kind == "instance":
        return InstanceNorm(channels)
    if kind == "l1":
        return L1Norm(channels)
    if kind == "l2":
        return L2Norm(channels)
    raise ValueError(f"unknown normalization kind {kind!r}; expected one of {NORM_KINDS}")
