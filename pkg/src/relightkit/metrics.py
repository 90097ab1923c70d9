"""Image comparison metrics: scale-invariant MSE and SSIM, plus reporting.

Si-MSE fits one global scale to the prediction (jointly over pixels and
channels) before the squared error, so global exposure offsets are free.
SSIM uses the standard 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
dynamic range 1.0, computed per channel over valid window positions and then
averaged.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03

max_workers = 1  # evaluate() parallelism cap; CLI --threads sets this


def _pixels(img) -> np.ndarray:
    px = np.asarray(img.pixels if hasattr(img, "pixels") else img, np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    return px


def si_mse(pred, gt) -> float:
    """MSE after the best single scale s* = <pred,gt>/<pred,pred> on pred."""
    p = _pixels(pred)
    g = _pixels(gt)
    if p.shape != g.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {g.shape}")
    if not g.any():
        raise ValueError("ground truth is identically zero")
    denom = float(np.dot(p.ravel(), p.ravel()))
    if denom == 0.0:
        return float(np.mean(g * g))  # zero prediction: plain MSE against gt
    s = float(np.dot(p.ravel(), g.ravel())) / denom
    d = s * p - g
    return float(np.mean(d * d))


def _gaussian_kernel():
    r = _SSIM_WIN // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()


def _windowed_mean(x: np.ndarray) -> np.ndarray:
    """Gaussian-weighted local mean, valid positions only."""
    r = _SSIM_WIN // 2
    y = correlate1d(x, _KERNEL, axis=0, mode="constant")
    y = correlate1d(y, _KERNEL, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim(pred, gt) -> float:
    """Mean local SSIM over valid windows, averaged across channels."""
    p = _pixels(pred)
    g = _pixels(gt)
    if p.shape != g.shape:
        raise ValueError(f"image shapes differ: {p.shape} vs {g.shape}")
    if p.shape[0] < _SSIM_WIN or p.shape[1] < _SSIM_WIN:
        raise ValueError(f"images must be at least {_SSIM_WIN}x{_SSIM_WIN}")
    lo = min(p.min(), g.min())
    hi = max(p.max(), g.max())
    if lo < -1e-6 or hi > 1.0 + 1e-6:
        raise ValueError("ssim inputs must be scaled to [0, 1]")
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    vals = []
    for c in range(p.shape[2]):
        x = p[:, :, c]
        y = g[:, :, c]
        mx = _windowed_mean(x)
        my = _windowed_mean(y)
        sxx = _windowed_mean(x * x) - mx * mx
        syy = _windowed_mean(y * y) - my * my
        sxy = _windowed_mean(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class EvalReport:
    label: str
    si_mse_values: list
    ssim_values: list

    @property
    def si_mse_mean(self) -> float:
        return float(np.mean(self.si_mse_values))

    @property
    def si_mse_sigma(self) -> float:
        return float(np.std(self.si_mse_values))  # population sigma

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim_values))

    @property
    def ssim_sigma(self) -> float:
        return float(np.std(self.ssim_values))

    def to_json(self) -> str:
        return json.dumps(
            {
                "label": self.label,
                "si_mse": {
                    "mean": self.si_mse_mean,
                    "sigma": self.si_mse_sigma,
                    "values": self.si_mse_values,
                },
                "ssim": {
                    "mean": self.ssim_mean,
                    "sigma": self.ssim_sigma,
                    "values": self.ssim_values,
                },
            },
            indent=1,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["label", "metric", "mean", "sigma"])
        w.writerow([self.label, "si_mse", f"{self.si_mse_mean:.9g}", f"{self.si_mse_sigma:.9g}"])
        w.writerow([self.label, "ssim", f"{self.ssim_mean:.9g}", f"{self.ssim_sigma:.9g}"])
        return buf.getvalue()


def evaluate(pairs, label: str = "") -> EvalReport:
    """Score (pred, gt) pairs; aggregation order is the input order."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs to evaluate")

    def one(pair):
        pred, gt = pair
        return si_mse(pred, gt), ssim(pred, gt)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            scored = list(pool.map(one, pairs))
    else:
        scored = [one(p) for p in pairs]
    return EvalReport(label, [s[0] for s in scored], [s[1] for s in scored])
