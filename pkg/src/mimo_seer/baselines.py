"""Error accumulation under recursive prediction, and the predictors it is compared with.

The AR(1) process ``x_{j+1} = A x_j + noise`` gives a closed form for how a
recursive predictor's residual grows with the horizon: after k steps the
residual ``x_k - A^k x_0`` is a sum of k propagated noise terms with variance
``sigma^2 (1 - A^{2k}) / (1 - A^2)`` (``k sigma^2`` when ``|A| = 1``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from . import metrics
from .model import ModelConfig, Parameters, model_forward
from .numerics import make_rng, no_grad

__all__ = [
    "Ar1Params",
    "Ar1Result",
    "RolloutCurve",
    "ar1_rollout",
    "ar1_variance_closed_form",
    "ar1_covariance_closed_form",
    "copy_last",
    "miso_rollout",
    "framewise_error_curve",
]

STRATEGIES = ("mimo", "miso", "copy_last", "ar1")


@dataclass
class Ar1Params:
    A: Union[float, np.ndarray]
    noise_std: float = 1.0
    horizon: int = 20
    trials: int = 100_000
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.trials < 1 or self.horizon < 1:
            raise ValueError("trials and horizon must be >= 1")
        a = np.asarray(self.A, dtype=np.float64)
        if a.ndim not in (0, 2) or (a.ndim == 2 and a.shape[0] != a.shape[1]):
            raise ValueError("A must be a scalar or a square matrix")

    @property
    def spectral_radius(self) -> float:
        a = np.asarray(self.A, dtype=np.float64)
        return float(abs(a)) if a.ndim == 0 else float(np.max(np.abs(np.linalg.eigvals(a))))


@dataclass
class Ar1Result:
    variance: np.ndarray  # [horizon], step k = index + 1; mean over components for matrix A
    component_variance: np.ndarray  # [horizon, d]
    spectral_radius: float
    trajectories: Optional[np.ndarray] = None  # [trials, horizon + 1, d] when requested


@dataclass
class RolloutCurve:
    strategy: str
    values: List[float]
    metric: str = "mse"

    def __post_init__(self):
        if any(v < 0 for v in self.values):
            raise ValueError("error curve values must be >= 0")

    def __len__(self) -> int:
        return len(self.values)


def ar1_rollout(p: Ar1Params, keep_trajectories: bool = False, x0=None) -> Ar1Result:
    """Monte-Carlo simulation of the AR(1) residual variance per step."""
    a = np.asarray(p.A, dtype=np.float64)
    d = 1 if a.ndim == 0 else a.shape[0]
    A = a.reshape(1, 1) if a.ndim == 0 else a
    rng = make_rng(p.seed)
    x = np.zeros((p.trials, d)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (p.trials, d)).copy()
    mean_path = x.copy()  # A^k x0, propagated without noise
    comp_var = np.empty((p.horizon, d))
    traj = np.empty((p.trials, p.horizon + 1, d)) if keep_trajectories else None
    if traj is not None:
        traj[:, 0] = x
    for k in range(p.horizon):
        noise = rng.standard_normal((p.trials, d)) * p.noise_std
        x = x @ A.T + noise
        mean_path = mean_path @ A.T
        resid = x - mean_path
        comp_var[k] = resid.var(axis=0)
        if traj is not None:
            traj[:, k + 1] = x
    return Ar1Result(comp_var.mean(axis=1), comp_var, p.spectral_radius, traj)


def ar1_variance_closed_form(A: float, sigma: float, k: int) -> float:
    """Variance of the k-step AR(1) residual for scalar A."""
    if k < 0:
        raise ValueError("k must be >= 0")
    a2 = float(A) * float(A)
    if a2 == 1.0:
        return k * sigma * sigma
    return sigma * sigma * (1.0 - a2 ** k) / (1.0 - a2)


def ar1_covariance_closed_form(A: np.ndarray, sigma: float, k: int) -> np.ndarray:
    """Residual covariance sigma^2 * sum_{j<k} A^j (A^j)^T for matrix A."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    cov = np.zeros_like(A)
    power = np.eye(A.shape[0])
    for _ in range(k):
        cov += power @ power.T
        power = A @ power
    return sigma * sigma * cov


def copy_last(frames: np.ndarray, n: int) -> np.ndarray:
    """Repeat the last observed frame n times along the time axis.

    ``frames`` is [m, C, H, W] or batched [B, m, C, H, W].
    """
    frames = np.asarray(frames)
    if n < 1:
        raise ValueError("n must be >= 1")
    axis = frames.ndim - 4
    if axis < 0 or frames.shape[axis] < 1:
        raise ValueError(f"need at least one frame, got shape {frames.shape}")
    last = np.take(frames, [-1], axis=axis)
    return np.repeat(last, n, axis=axis)


def miso_rollout(params: Parameters, cfg: ModelConfig, frames: np.ndarray, total_n: int,
                 mode: str = "single") -> np.ndarray:
    """Extend prediction to ``total_n`` frames by feeding predictions back as input.

    ``mode="single"`` keeps only the first predicted frame of each call
    (single-out recursion); ``mode="block"`` keeps every frame of each call
    (block recursion). The conditioning window slides and keeps its length.
    """
    if total_n < 1:
        raise ValueError("total_n must be >= 1")
    if mode not in ("single", "block"):
        raise ValueError("mode must be 'single' or 'block'")
    window = np.asarray(frames)
    batched = window.ndim == 5
    if not batched:
        window = window[None]
    m = window.shape[1]
    dtype = params["head.weight"].dtype
    window = window.astype(dtype)
    produced: List[np.ndarray] = []
    count = 0
    with no_grad():
        while count < total_n:
            pred = model_forward(window, params, cfg).prediction.data
            take = pred[:, :1] if mode == "single" else pred
            take = take[:, :total_n - count]
            produced.append(take)
            count += take.shape[1]
            window = np.concatenate([window, take], axis=1)[:, -m:]
    out = np.concatenate(produced, axis=1)
    return out if batched else out[0]


def _frame_metric(name: str):
    table = {
        "mse": lambda a, b: metrics.mse(a, b, "frame_sum"),
        "mae": lambda a, b: metrics.mae(a, b, "frame_sum"),
        "mse_pixel": lambda a, b: metrics.mse(a, b, "pixel_mean"),
        "mae_pixel": lambda a, b: metrics.mae(a, b, "pixel_mean"),
        "ssim": metrics.ssim,
        "psnr": metrics.psnr,
    }
    if name not in table:
        raise ValueError(f"unknown metric {name!r}; choose from {sorted(table)}")
    return table[name]


def framewise_error_curve(prediction: np.ndarray, ground_truth: np.ndarray, metric: str = "mse",
                          strategy: str = "mimo") -> RolloutCurve:
    """Metric at every horizon step, averaged over the batch when inputs are [B, T, C, H, W]."""
    p, t = np.asarray(prediction), np.asarray(ground_truth)
    if p.shape != t.shape:
        raise ValueError(f"length/shape mismatch: prediction {p.shape} vs truth {t.shape}")
    if p.ndim == 4:
        p, t = p[None], t[None]
    fn = _frame_metric(metric)
    values = [float(np.mean([fn(p[b, k], t[b, k]) for b in range(p.shape[0])])) for k in range(p.shape[1])]
    return RolloutCurve(strategy, values, metric)
