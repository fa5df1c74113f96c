"""Evaluation metrics: PSNR, SSIM, and the spectral angle mapper.

Pinned conventions (the numbers depend on them):

* PSNR: 10*log10(peak^2 / MSE) with MSE pooled over all bands and pixels;
  a zero-MSE pair reports the +inf sentinel.
* SSIM: per-band maps with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
  K2=0.03, dynamic range 1.0, valid windows only; mean over the map, then
  over bands, then over tiles.
* SAM: per-pixel angle between the predicted and reference spectra,
  averaged over pixels and reported in degrees; zero-norm pixels contribute
  angle 0 (counted separately rather than poisoning the mean with NaN).

Metrics operate on raw (unclamped) model outputs.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import stack_pairs

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    sam_deg: float
    n_tiles: int
    per_tile: list = None

    def to_json(self, path=None):
        doc = {
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "sam_deg": self.sam_deg,
            "n_tiles": self.n_tiles,
            "per_tile": self.per_tile,
        }
        text = json.dumps(doc, indent=1, sort_keys=True) + "\n"
        if path is not None:
            with open(path, "w") as f:
                f.write(text)
        return text


def psnr(pred, target, peak=1.0):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mse = np.mean((pred.astype(np.float64) - target.astype(np.float64)) ** 2)
    if mse == 0.0:
        return float("inf")
    return float(10.0 * math.log10(peak * peak / mse))


def _gaussian_window(size, sigma):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim(pred, target, data_range=1.0):
    """Mean SSIM over valid window positions of each band, then over bands.
    Accepts [H,W] or [C,H,W]."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim == 2:
        pred, target = pred[None], target[None]
    if pred.shape[1] < SSIM_WINDOW or pred.shape[2] < SSIM_WINDOW:
        raise ValueError(
            f"spatial dims {pred.shape[1:]} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window"
        )
    w = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    x = pred.astype(np.float64)
    y = target.astype(np.float64)

    def win_mean(a):
        v = sliding_window_view(a, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
        return np.einsum("chwuv,uv->chw", v, w)

    mu_x = win_mean(x)
    mu_y = win_mean(y)
    sxx = win_mean(x * x) - mu_x * mu_x
    syy = win_mean(y * y) - mu_y * mu_y
    sxy = win_mean(x * y) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2))
    return float(ssim_map.mean())


def sam(pred, target):
    """Mean spectral angle in degrees between [C,H,W] cubes, C >= 2.
    Returns (angle_deg, n_zero_norm_pixels)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    if pred.ndim != 3 or pred.shape[0] < 2:
        raise ValueError(f"sam expects [C>=2,H,W], got shape {pred.shape}")
    p = pred.reshape(pred.shape[0], -1).astype(np.float64)
    t = target.reshape(target.shape[0], -1).astype(np.float64)
    dot = (p * t).sum(axis=0)
    norm = np.linalg.norm(p, axis=0) * np.linalg.norm(t, axis=0)
    zero = norm == 0.0
    cosang = np.ones_like(dot)
    np.divide(dot, norm, out=cosang, where=~zero)
    angles = np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0)))
    angles[zero] = 0.0
    return float(angles.mean()), int(zero.sum())


def evaluate(model, pairs):
    """Run the model over LR/HR pairs and aggregate all three metrics:
    per-tile PSNR/SSIM/SAM, then plain means over tiles."""
    if not pairs:
        raise ValueError("cannot evaluate an empty pair set")
    x, y = stack_pairs(pairs)
    preds = model.forward(x, training=False)
    per_tile = []
    for i in range(len(pairs)):
        p = preds[i]
        t = y[i]
        angle, _ = sam(p, t)
        per_tile.append({
            "psnr_db": psnr(p, t),
            "ssim": ssim(p, t),
            "sam_deg": angle,
        })
    return MetricsReport(
        psnr_db=float(np.mean([m["psnr_db"] for m in per_tile])),
        ssim=float(np.mean([m["ssim"] for m in per_tile])),
        sam_deg=float(np.mean([m["sam_deg"] for m in per_tile])),
        n_tiles=len(pairs),
        per_tile=per_tile,
    )
