"""Dense tensor kernels everything else builds on.

Tensors are plain numpy arrays, float32 storage, row-major, with image-like
axes ordered [channels, height, width] ([batch, C, H, W] when batched).

Conventions pinned here because they are part of the artifact's contract:

* conv2d is cross-correlation (no kernel flip), stride 1, "same" zero
  padding of (K-1)/2 on each side; odd kernels only.
* gaussian_blur truncates the kernel at radius ceil(3*sigma), renormalizes
  it to sum 1, and handles borders with reflective padding (numpy
  ``mode='reflect'``, edge sample not repeated).
* bilinear_resize maps coordinates with the align-corners=false convention:
  src = (dst + 0.5) * in_size / out_size - 0.5, clamped to the valid range.
* decimate keeps indices 0, s, 2s, ... (no half-sample phase offset).
* Rng wraps numpy's PCG64 generator; a given seed yields the same draw
  sequence on every platform.
"""

import math

import numpy as np
import scipy.fft
from numpy.lib.stride_tricks import sliding_window_view


class Rng:
    """Deterministic random source. All stochastic operations draw from one
    of these so that a run is fully reproducible from its seed."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, shape, std=1.0):
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)


def _check_conv_shapes(x, w, b):
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be [B,C,H,W], got shape {x.shape}")
    if w.ndim != 4:
        raise ValueError(f"conv2d weights must be [Co,Ci,Kh,Kw], got shape {w.shape}")
    co, ci, kh, kw = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d requires odd kernel sizes, got {kh}x{kw}")
    if x.shape[1] != ci:
        raise ValueError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"weights expect {ci}"
        )
    if b.shape != (co,):
        raise ValueError(f"conv2d bias must have shape ({co},), got {b.shape}")


def _rfft2(a, s, t):
    return scipy.fft.rfft2(a, s=(s, t), axes=(2, 3))


def _irfft2(spec, s, t):
    return scipy.fft.irfft2(spec, s=(s, t), axes=(2, 3))


def _phase(shift_y, shift_x, s, t, dtype):
    """Frequency-domain delay factors e^{-2*pi*i*k*shift/N} for a 2-D rfft
    of size (s, t): (full first axis, half second axis)."""
    cdtype = np.complex64 if dtype == np.float32 else np.complex128
    py = np.exp(-2j * np.pi * np.arange(s) * (shift_y / s)).astype(cdtype)
    px = np.exp(-2j * np.pi * np.arange(t // 2 + 1) * (shift_x / t)).astype(cdtype)
    return py[:, None] * px[None, :]


def _kernel_spectrum(wflip, s, t, dtype):
    """rfft2 spectrum of the zero-padded kernels, laid out (s, f, Ci, Co).

    The kernel occupies only kh x kw samples of the (s, t) grid, so two
    small DFT matrix products beat a full-size padded FFT by a wide margin.
    """
    cdtype = np.complex64 if dtype == np.float32 else np.complex128
    kh, kw = wflip.shape[2], wflip.shape[3]
    es = np.exp(-2j * np.pi * np.outer(np.arange(s), np.arange(kh)) / s).astype(cdtype)
    et = np.exp(-2j * np.pi * np.outer(np.arange(t // 2 + 1), np.arange(kw)) / t).astype(cdtype)
    part = np.tensordot(wflip.astype(dtype, copy=False), et, axes=([3], [1]))  # (Co,Ci,kh,f)
    spec = np.tensordot(es, part, axes=([1], [2]))  # (s,Co,Ci,f)
    return np.ascontiguousarray(spec.transpose(0, 3, 2, 1))


def _corner_inverse(spec, s, t, kh, kw):
    """Top-left kh x kw corner of the 2-D inverse rfft of per-plane spectra
    shaped (s, f, P1, P2), returned as (P1, P2, kh, kw).

    Inverts the first axis with a kh-row inverse-DFT matrix product and the
    half axis with a short irfft, skipping the unused bulk of the grid.
    """
    esk = np.exp(2j * np.pi * np.outer(np.arange(kh), np.arange(s)) / s)
    esk = (esk / s).astype(spec.dtype)
    rows = np.tensordot(esk, spec, axes=([1], [0]))  # (kh,f,P1,P2)
    out = scipy.fft.irfft(rows, n=t, axis=1)[:, :kw]
    return np.ascontiguousarray(out.transpose(2, 3, 0, 1))


def conv2d_forward(x, w, b, cache=None):
    """Same-padded stride-1 cross-correlation plus per-channel bias.

    x: [B,Ci,H,W], w: [Co,Ci,Kh,Kw], b: [Co] -> [B,Co,H,W]

    Evaluated in the frequency domain: on a (H+Kh-1, W+Kw-1) transform the
    zero-padded linear correlation coincides with the circular one, so the
    result is exact up to FFT rounding (~1e-6 relative in float32 storage,
    ~1e-14 in float64). If ``cache`` is a dict, the input and weight
    spectra are stored there for reuse by conv2d_backward.
    """
    _check_conv_shapes(x, w, b)
    bsz, _, h, wd = x.shape
    co, ci, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    dtype = np.result_type(x, w)
    s, t = h + kh - 1, wd + kw - 1

    xf = _rfft2(x.astype(dtype, copy=False), s, t)  # (B,Ci,s,f)
    # batched per-bin matmul; the copy keeps the operand contiguous, which
    # is an order of magnitude faster than handing matmul strided views
    xt = np.ascontiguousarray(xf.transpose(2, 3, 0, 1))  # (s,f,B,Ci)
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1])
    wt = _kernel_spectrum(wflip, s, t, dtype)  # (s,f,Ci,Co)
    prod = np.matmul(xt, wt)  # (s,f,B,Co)
    full = scipy.fft.irfft2(prod, s=(s, t), axes=(0, 1))  # (s,t,B,Co)
    out = np.ascontiguousarray(full[ph:ph + h, pw:pw + wd].transpose(2, 3, 0, 1))
    out += b.astype(dtype, copy=False)[None, :, None, None]
    if cache is not None:
        cache.update(xt=xt, wt=wt, shape=x.shape, wshape=w.shape, dtype=dtype)
    return out


def conv2d_backward(x, w, grad_output, cache=None, need_grad_input=True):
    """Analytic gradients of conv2d_forward.

    Returns (grad_input, grad_weights, grad_bias); grad_input is None when
    need_grad_input is false (the caller feeds the network's first layer
    and has no use for it). A ``cache`` dict filled by conv2d_forward lets
    the backward pass reuse the forward spectra; the padded-input and
    unflipped-weight spectra it needs are recovered with the FFT shift and
    flip identities instead of fresh transforms.
    """
    co, ci, kh, kw = w.shape
    bsz, _, h, wd = x.shape
    if grad_output.shape != (bsz, co, h, wd):
        raise ValueError(
            f"grad_output shape {grad_output.shape} inconsistent with "
            f"input {x.shape} and weights {w.shape}"
        )
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    dtype = np.result_type(x, w, grad_output)
    s, t = h + kh - 1, wd + kw - 1

    if cache is not None and cache.get("shape") == x.shape and cache.get("dtype") == dtype:
        xt, wt = cache["xt"], cache["wt"]
    else:
        xf = _rfft2(x.astype(dtype, copy=False), s, t)
        xt = np.ascontiguousarray(xf.transpose(2, 3, 0, 1))  # (s,f,B,Ci)
        wt = _kernel_spectrum(
            np.ascontiguousarray(w[:, :, ::-1, ::-1]), s, t, dtype)

    grad_bias = grad_output.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    gof = _rfft2(grad_output.astype(dtype, copy=False), s, t)  # (B,Co,s,f)
    gt = np.ascontiguousarray(gof.transpose(2, 3, 0, 1))  # (s,f,B,Co)

    # gw[o,c,u,v] = sum_{b,y,x} xpad[b,c,u+y,v+x] * go[b,y,x]; the padded
    # input's spectrum is the cached one delayed by (ph, pw), and only the
    # kh x kw corner of the inverse transform is wanted
    xpt = xt * _phase(ph, pw, s, t, dtype)[:, :, None, None]
    prod = np.matmul(np.conj(gt).transpose(0, 1, 3, 2), xpt)  # (s,f,Co,Ci)
    grad_weights = _corner_inverse(prod, s, t, kh, kw)

    grad_input = None
    if need_grad_input:
        # same-padded correlation of go with the flipped, channel-transposed
        # weights; F(w) recovered from F(flip(w)) via conjugation + delay
        wu = np.conj(wt) * _phase(kh - 1, kw - 1, s, t, dtype)[:, :, None, None]
        prod = np.matmul(gt, wu.transpose(0, 1, 3, 2))  # (s,f,B,Ci)
        full = scipy.fft.irfft2(prod, s=(s, t), axes=(0, 1))
        grad_input = np.ascontiguousarray(
            full[ph:ph + h, pw:pw + wd].transpose(2, 3, 0, 1))
    return grad_input, grad_weights, grad_bias


def power_expand(x, q):
    """Concatenate [x^1, x^2, ..., x^Q] along the channel axis.

    The first-power block comes first; this ordering is part of the
    checkpoint format contract.
    """
    if not isinstance(q, (int, np.integer)) or q < 1:
        raise ValueError(f"power_expand requires integer Q >= 1, got {q!r}")
    blocks = [x]
    for _ in range(q - 1):
        blocks.append(blocks[-1] * x)
    return np.concatenate(blocks, axis=1)


def power_expand_backward(x, q, grad_output):
    """grad wrt x of power_expand: sum_n n * x^(n-1) * grad_block_n."""
    if not isinstance(q, (int, np.integer)) or q < 1:
        raise ValueError(f"power_expand requires integer Q >= 1, got {q!r}")
    ci = x.shape[1]
    if grad_output.shape[1] != ci * q:
        raise ValueError(
            f"grad_output has {grad_output.shape[1]} channels, expected "
            f"{ci}*{q} = {ci * q}"
        )
    grad = grad_output[:, :ci].copy()
    for n in range(2, q + 1):
        block = grad_output[:, (n - 1) * ci: n * ci]
        grad += n * x ** (n - 1) * block
    return grad


def tanh_forward(x):
    return np.tanh(x)


def tanh_backward(y, grad_output):
    """Backward through tanh given the forward *output* y."""
    return (1.0 - y * y) * grad_output


def gaussian_kernel_2d(sigma, dtype=np.float64):
    """Discretized 2-D Gaussian, truncated at radius ceil(3*sigma) and
    renormalized to sum exactly 1."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    r = math.ceil(3.0 * sigma)
    ax = np.arange(-r, r + 1, dtype=dtype)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def gaussian_blur(x, sigma):
    """Per-band low-pass filter of a [C,H,W] cube with reflective borders."""
    if x.ndim != 3:
        raise ValueError(f"gaussian_blur expects [C,H,W], got shape {x.shape}")
    k = gaussian_kernel_2d(sigma, dtype=np.float64)
    r = k.shape[0] // 2
    xp = np.pad(x, ((0, 0), (r, r), (r, r)), mode="reflect")
    win = sliding_window_view(xp, k.shape, axis=(1, 2))  # (C,H,W,K,K)
    out = np.einsum("chwuv,uv->chw", win.astype(np.float64), k)
    return out.astype(x.dtype)


def decimate(x, s):
    """Keep samples at indices 0, s, 2s, ... along both spatial axes."""
    if not isinstance(s, (int, np.integer)) or s < 1:
        raise ValueError(f"decimation stride must be an integer >= 1, got {s!r}")
    if x.ndim != 3:
        raise ValueError(f"decimate expects [C,H,W], got shape {x.shape}")
    return np.ascontiguousarray(x[:, ::s, ::s])


def bilinear_resize(x, out_h, out_w):
    """Per-band bilinear interpolation of a [C,H,W] cube (align-corners=false).

    Output values are convex combinations of input values, so the result
    stays within the input's value range.
    """
    if x.ndim != 3:
        raise ValueError(f"bilinear_resize expects [C,H,W], got shape {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()

    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]

    xd = x.astype(np.float64)
    top = xd[:, y0][:, :, x0] * (1 - wx) + xd[:, y0][:, :, x1] * wx
    bot = xd[:, y1][:, :, x0] * (1 - wx) + xd[:, y1][:, :, x1] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(x.dtype)


def randn_init(shape, gain, rng):
    """i.i.d. Normal(0, gain^2) initialization tensor, float32."""
    if gain <= 0:
        raise ValueError(f"init gain must be positive, got {gain}")
    return rng.normal(shape, std=gain).astype(np.float32)
