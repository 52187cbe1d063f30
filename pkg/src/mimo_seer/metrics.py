"""Frame-level video prediction metrics: MSE, MAE, SSIM, PSNR and CSI.

A *frame* is the trailing ``[C, H, W]`` block of an array (a 2-D array is a
single-channel frame). ``mse``/``mae`` default to the convention of the Moving
MNIST literature: squared/absolute error summed over each frame, then averaged
over frames. The ``"pixel_mean"`` convention averages over pixels instead.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "PSNR_CAP",
    "mse",
    "mae",
    "ssim",
    "psnr",
    "csi_counts",
    "csi_from_counts",
    "csi",
    "MetricsReport",
    "evaluate",
]

PSNR_CAP = 100.0
CONVENTIONS = ("frame_sum", "pixel_mean")


def _frames(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        return a[None, None]
    if a.ndim < 2:
        raise ValueError(f"need at least a 2-D frame, got shape {a.shape}")
    return a.reshape((-1,) + a.shape[-3:]) if a.ndim >= 3 else a


def _paired(pred, truth):
    p, t = np.asarray(pred), np.asarray(truth)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    return _frames(p), _frames(t)


def _reduce(err: np.ndarray, convention: str) -> float:
    if convention == "frame_sum":
        return float(err.reshape(err.shape[0], -1).sum(axis=1).mean())
    if convention == "pixel_mean":
        return float(err.mean())
    raise ValueError(f"convention must be one of {CONVENTIONS}")


def mse(pred, truth, convention: str = "frame_sum") -> float:
    p, t = _paired(pred, truth)
    d = p - t
    return _reduce(d * d, convention)


def mae(pred, truth, convention: str = "frame_sum") -> float:
    p, t = _paired(pred, truth)
    return _reduce(np.abs(p - t), convention)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


_WINDOW = _gaussian_window()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    win = sliding_window_view(img, (k, k))
    return np.einsum("ijkl,k,l->ij", win, g, g)


def _ssim_2d(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a = _filter_valid(a, _WINDOW)
    mu_b = _filter_valid(b, _WINDOW)
    var_a = _filter_valid(a * a, _WINDOW) - mu_a * mu_a
    var_b = _filter_valid(b * b, _WINDOW) - mu_b * mu_b
    cov = _filter_valid(a * b, _WINDOW) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(pred_frame, truth_frame, data_range: float = 1.0) -> float:
    """Windowed SSIM (11x11 Gaussian, sigma 1.5, K1=0.01, K2=0.03) averaged over valid positions.

    Multi-channel frames [C, H, W] return the mean over channels.
    """
    a = np.asarray(pred_frame, dtype=np.float64)
    b = np.asarray(truth_frame, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError(f"ssim takes a [H, W] or [C, H, W] frame, got shape {a.shape}")
    if min(a.shape[-2:]) < _WINDOW.size:
        raise ValueError(f"frame {a.shape[-2:]} smaller than the {_WINDOW.size}x{_WINDOW.size} window")
    return float(np.mean([_ssim_2d(x, y, data_range) for x, y in zip(a, b)]))


def psnr(pred_frame, truth_frame, max_val: float = 1.0) -> float:
    """10 log10(max^2 / per-pixel MSE); identical frames return ``PSNR_CAP``."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    a = np.asarray(pred_frame, dtype=np.float64)
    b = np.asarray(truth_frame, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(max_val * max_val / err), PSNR_CAP)


def csi_counts(pred, truth, threshold: float):
    """(hits, misses, false_alarms) after binarizing both fields at ``threshold``."""
    p = np.asarray(pred) >= threshold
    t = np.asarray(truth) >= threshold
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    hits = int(np.count_nonzero(p & t))
    misses = int(np.count_nonzero(t & ~p))
    false_alarms = int(np.count_nonzero(p & ~t))
    return hits, misses, false_alarms


def csi_from_counts(hits: int, misses: int, false_alarms: int) -> float:
    total = hits + misses + false_alarms
    return 1.0 if total == 0 else hits / total


def csi(pred, truth, threshold: float) -> float:
    """Critical success index; 1.0 when neither field has any positive pixel."""
    return csi_from_counts(*csi_counts(pred, truth, threshold))


@dataclass
class MetricsReport:
    per_frame: List[dict]
    aggregates: Dict[str, float]
    csi: Dict[str, float]
    frames: int
    sequences: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> "OrderedDict":
        doc = OrderedDict()
        doc["config_hash"] = self.config_hash
        doc["frames"] = self.frames
        doc["sequences"] = self.sequences
        doc["aggregates"] = dict(self.aggregates)
        doc["per_frame"] = list(self.per_frame)
        doc["csi"] = dict(self.csi)
        doc["conventions"] = {
            "mse": "per-frame sum of squared error, averaged over frames",
            "mae": "per-frame sum of absolute error, averaged over frames",
            "mse_pixel": "mean squared error per pixel",
            "mae_pixel": "mean absolute error per pixel",
            "psnr": f"dB, max_val 1, capped at {PSNR_CAP:g}",
            "csi": "mean over frames of hits/(hits+misses+false_alarms)",
        }
        for k, v in self.extra.items():
            doc[k] = v
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _threshold_key(t: float) -> str:
    return f"{t:g}"


def evaluate(pred_batch, truth_batch, thresholds: Sequence[float] = (), config_hash: str = "",
             data_range: float = 1.0) -> MetricsReport:
    """Per-frame metrics for [B, T, C, H, W] predictions plus their means."""
    p = np.asarray(pred_batch, dtype=np.float64)
    t = np.asarray(truth_batch, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs truth {t.shape}")
    if p.ndim != 5:
        raise ValueError(f"expected [B, T, C, H, W] arrays, got shape {p.shape}")
    B, T = p.shape[:2]
    # frames smaller than the SSIM window get a null SSIM rather than an error
    with_ssim = min(p.shape[-2:]) >= _WINDOW.size
    per_frame = []
    csi_scores: Dict[str, List[float]] = {_threshold_key(th): [] for th in thresholds}
    saturated = 0
    for b in range(B):
        for k in range(T):
            a, g = p[b, k], t[b, k]
            d = a - g
            value = psnr(a, g, data_range)
            saturated += value >= PSNR_CAP
            per_frame.append(OrderedDict(
                sequence=b,
                frame=k,
                mse=float((d * d).sum()),
                mae=float(np.abs(d).sum()),
                mse_pixel=float((d * d).mean()),
                mae_pixel=float(np.abs(d).mean()),
                ssim=ssim(a, g, data_range) if with_ssim else None,
                psnr=float(value),
            ))
            for th in thresholds:
                csi_scores[_threshold_key(th)].append(csi(a, g, th))
    keys = ("mse", "mae", "mse_pixel", "mae_pixel", "ssim", "psnr")
    aggregates = OrderedDict((k, float(np.mean([f[k] for f in per_frame])) if k != "ssim" or with_ssim else None)
                             for k in keys)
    aggregates["psnr_saturated_frames"] = int(saturated)
    return MetricsReport(
        per_frame=per_frame,
        aggregates=aggregates,
        csi=OrderedDict((k, float(np.mean(v))) for k, v in csi_scores.items()),
        frames=B * T,
        sequences=B,
        config_hash=config_hash,
    )
