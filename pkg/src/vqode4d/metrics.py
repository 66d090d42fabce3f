"""Volume similarity metrics and interpolation/extrapolation scoring."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_DEFAULTS = {"window": 7, "k1": 0.01, "k2": 0.03}


@dataclass
class VolumeMetrics:
    mse: float
    psnr: float
    ssim: float


def _pair(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ValueError(f"mask shape {mask.shape} vs volume {a.shape}")
        if not mask.any():
            raise ValueError("empty mask")
    return a, b, mask


def mse(a, b, mask=None) -> float:
    a, b, mask = _pair(a, b, mask)
    d = (a - b) ** 2
    return float(d[mask].mean() if mask is not None else d.mean())


def psnr_from_mse(err: float, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    if err <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / err))


def psnr(a, b, data_range: float = 1.0, mask=None) -> float:
    return psnr_from_mse(mse(a, b, mask), data_range)


def ssim3d(a, b, window: int = 7, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0, mask=None) -> float:
    """Mean SSIM over all fully-contained cubic windows (uniform weights).

    With a mask, only windows whose centre voxel lies in the mask count.
    """
    a, b, mask = _pair(a, b, mask)
    if window % 2 == 0 or window < 1:
        raise ValueError("window must be odd")
    if window > min(a.shape):
        raise ValueError(f"window {window} larger than volume {a.shape}")
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    r = window // 2
    valid = tuple(slice(r, s - r) for s in a.shape)

    def box(x):
        return ndimage.uniform_filter(x, size=window, mode="constant")[valid]

    mu_a, mu_b = box(a), box(b)
    var_a = box(a * a) - mu_a ** 2
    var_b = box(b * b) - mu_b ** 2
    cov = box(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    if mask is not None:
        centres = mask[valid]
        if not centres.any():
            raise ValueError("mask has no voxel at a valid window centre")
        return float(smap[centres].mean())
    return float(smap.mean())


def volume_metrics(pred, truth, mask=None, data_range=1.0, **ssim_kw) -> VolumeMetrics:
    err = mse(pred, truth, mask)
    return VolumeMetrics(err, psnr_from_mse(err, data_range), ssim3d(pred, truth, data_range=data_range,
                                                                    mask=mask, **ssim_kw))


def classify_time(t: float, input_times: Sequence[float]) -> str:
    """``reconstruction`` at an input time, ``interpolation`` strictly inside the
    input span, ``extrapolation`` after the last input."""
    first, last = min(input_times), max(input_times)
    if any(abs(t - s) < 5e-3 for s in input_times):
        return "reconstruction"
    if first < t < last:
        return "interpolation"
    if t > last:
        return "extrapolation"
    return "before_baseline"


@dataclass
class SplitScore:
    count: int
    mean: VolumeMetrics | None


def score_sequence(predicted: dict, truth: dict, input_times: Sequence[float], mask=None, **kw):
    """Per-time metrics plus per-split means for interpolation and extrapolation.

    ``predicted`` and ``truth`` map time -> volume; times are matched on their
    2-decimal rendering.
    """
    pk = {f"{t:.2f}": v for t, v in predicted.items()}
    tk = {f"{t:.2f}": (t, v) for t, v in truth.items()}
    rows = []
    for key in sorted(set(pk) & set(tk), key=float):
        t, v = tk[key]
        rows.append((t, classify_time(t, input_times), volume_metrics(pk[key], v, mask, **kw)))
    if not rows:
        raise ValueError("no matched times between prediction and truth")
    splits = {}
    for name in ("interpolation", "extrapolation"):
        ms = [m for _, s, m in rows if s == name]
        splits[name] = SplitScore(len(ms), VolumeMetrics(*np.mean([[m.mse, m.psnr, m.ssim] for m in ms], axis=0))
                                  if ms else None)
    return rows, splits
