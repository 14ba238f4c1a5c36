"""Evaluation metrics: histogram KL divergence, PSNR, SSIM.

Histogram convention (recorded in every report header): 256 uniform bins
over [-0.2, 0.2] in normalized intensity units, epsilon smoothing 1e-9,
out-of-range noise values clipped into the end bins so every value counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .errors import ShapeError

HIST_BINS = 256
HIST_RANGE = 0.2
HIST_EPS = 1e-9

SSIM_WINDOW = 8  # patches are 32x32; the usual 11 window would be cramped
PSNR_CAP_DB = 100.0


def uniform_edges(half_range: float = HIST_RANGE, bins: int = HIST_BINS) -> np.ndarray:
    return np.linspace(-half_range, half_range, bins + 1)


@dataclass
class NoiseHistogram:
    edges: np.ndarray
    counts: np.ndarray
    eps: float = HIST_EPS

    def __post_init__(self):
        self.edges = np.asarray(self.edges, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.shape[0] != self.edges.shape[0] - 1:
            raise ShapeError("counts length must be len(edges) - 1")
        if np.any(self.counts < 0):
            raise ValueError("histogram counts must be non-negative")

    def probabilities(self) -> np.ndarray:
        total = self.counts.sum() + self.eps * len(self.counts)
        return (self.counts + self.eps) / total


def noise_histogram(noisy, clean, edges: np.ndarray | None = None) -> NoiseHistogram:
    """Histogram of (noisy - clean); out-of-range values land in the end bins."""
    noisy = np.asarray(noisy, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if noisy.shape != clean.shape:
        raise ShapeError(f"shape mismatch: {noisy.shape} vs {clean.shape}")
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    resid = np.clip((noisy - clean).ravel(), edges[0], edges[-1])
    counts, _ = np.histogram(resid, bins=edges)
    return NoiseHistogram(edges, counts)


def values_histogram(values, edges: np.ndarray | None = None) -> NoiseHistogram:
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    vals = np.clip(np.asarray(values, dtype=np.float64).ravel(), edges[0], edges[-1])
    counts, _ = np.histogram(vals, bins=edges)
    return NoiseHistogram(edges, counts)


def gaussian_histogram(stds, edges: np.ndarray | None = None,
                       weight: float = 1.0) -> NoiseHistogram:
    """Analytic bin masses of a zero-mean Gaussian (mixture over given stds).

    Tail mass outside the range is folded into the end bins, matching the
    clipping rule of the empirical histograms.
    """
    edges = uniform_edges() if edges is None else np.asarray(edges, dtype=np.float64)
    stds = np.atleast_1d(np.asarray(stds, dtype=np.float64)).ravel()
    cdf = 0.5 * (1.0 + erf(edges[None, :] / (stds[:, None] * np.sqrt(2.0))))
    cdf[:, 0] = 0.0
    cdf[:, -1] = 1.0
    mass = np.diff(cdf, axis=1).mean(axis=0)
    return NoiseHistogram(edges, mass * weight)


def kl_divergence(p: NoiseHistogram, q: NoiseHistogram) -> float:
    """KL(p || q) in nats over epsilon-smoothed bin probabilities."""
    if p.edges.shape != q.edges.shape or not np.allclose(p.edges, q.edges):
        raise ShapeError("histograms must share identical binning")
    pp = p.probabilities()
    qq = q.probabilities()
    return float(np.sum(pp * np.log(pp / qq)))


def psnr(estimate, clean, peak: float = 1.0, cap: float = PSNR_CAP_DB) -> float:
    estimate = np.asarray(estimate, dtype=np.float64)
    clean = np.asarray(clean, dtype=np.float64)
    if estimate.shape != clean.shape:
        raise ShapeError(f"shape mismatch: {estimate.shape} vs {clean.shape}")
    mse = float(np.mean((estimate - clean) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * np.log10(peak * peak / mse), cap)


def _window_means(x: np.ndarray, win: int) -> np.ndarray:
    """Means over all sliding win x win windows of a (..., H, W) array."""
    c1 = np.cumsum(x, axis=-2)
    c1 = np.concatenate([np.zeros_like(c1[..., :1, :]), c1], axis=-2)
    c2 = np.cumsum(c1, axis=-1)
    c2 = np.concatenate([np.zeros_like(c2[..., :, :1]), c2], axis=-1)
    sums = (c2[..., win:, win:] - c2[..., :-win, win:]
            - c2[..., win:, :-win] + c2[..., :-win, :-win])
    return sums / (win * win)


def ssim(estimate, clean, peak: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean SSIM over uniform sliding windows and channels."""
    x = np.asarray(estimate, dtype=np.float64)
    y = np.asarray(clean, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ShapeError(f"spatial extent {x.shape[-2:]} smaller than window {window}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx = _window_means(x, window)
    my = _window_means(y, window)
    vx = _window_means(x * x, window) - mx * mx
    vy = _window_means(y * y, window) - my * my
    cxy = _window_means(x * y, window) - mx * my
    score = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(score.mean())


@dataclass
class MetricsRow:
    camera_id: str
    iso: int
    scene_id: int | str
    count: int
    nll_per_dim: float
    kl: float
    psnr_db: float
    ssim_score: float

    HEADER = "camera,iso,scene,count,nll_per_dim,kl,psnr,ssim"

    def as_csv(self) -> str:
        def fmt(v):
            return "" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.6f}"
        return (f"{self.camera_id},{self.iso},{self.scene_id},{self.count},"
                f"{fmt(self.nll_per_dim)},{fmt(self.kl)},{fmt(self.psnr_db)},{fmt(self.ssim_score)}")
