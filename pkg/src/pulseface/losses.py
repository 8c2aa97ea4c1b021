"""
Training objectives: negative Pearson loss for rPPG, weighted RMSE for SpO2,
and label-distribution-smoothing (LDS) sample weights.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage, stats

from pulseface.autodiff import Tensor, as_tensor
from pulseface.errors import DegenerateBatchError, RangeError, ShapeError
from pulseface.signal_core import Waveform

EPS = 1e-8


def _as_batch(values) -> Tensor:
    if isinstance(values, Waveform):
        values = values.samples
    t = as_tensor(values)
    if t.ndim == 1:
        t = t.reshape(1, t.shape[0])
    if t.ndim != 2:
        raise ShapeError("pearson_loss input", t.shape, ("N", "T"))
    return t


def pearson_loss(pred, gt) -> Tensor:
    """
    1 - r, averaged over the batch.

    ``pred`` and ``gt`` are waveforms, 1-D sequences or N x T batches of equal
    shape. A zero-variance argument gives r = 0 (loss 1).
    """
    x, y = _as_batch(pred), _as_batch(gt)
    if x.shape != y.shape:
        raise ShapeError("pearson_loss", x.shape, y.shape)
    t = x.shape[1]
    if t < 2:
        raise ShapeError("pearson_loss needs T >= 2", x.shape, y.shape)

    sx, sy = x.sum(axis=1), y.sum(axis=1)
    sxy = (x * y).sum(axis=1)
    sxx = (x * x).sum(axis=1)
    syy = (y * y).sum(axis=1)
    num = t * sxy - sx * sy
    den = ((t * sxx - sx * sx) * (t * syy - sy * sy)).relu().sqrt()
    r = num / (den + EPS)
    return (1.0 - r).mean()


def weighted_rmse(pred, gt, weights) -> Tensor:
    """sqrt(sum w (p - g)^2 / (sum w + eps)); eps sits inside the weight sum."""
    p, g = as_tensor(pred), as_tensor(gt)
    w = np.asarray(weights, dtype=np.float64)
    if p.shape != g.shape or w.shape != p.shape or p.ndim != 1:
        raise ShapeError("weighted_rmse", p.shape, g.shape, w.shape)
    if (w < 0).any():
        raise RangeError("weights must be non-negative")
    if not w.any():
        raise DegenerateBatchError("all sample weights are zero")
    diff = p - g
    return ((diff * diff * w).sum() / (w.sum() + EPS)).sqrt()


@dataclass(frozen=True)
class LdsConfig:
    kernel_size: int = 7
    alpha: float = 2.0
    beta: float = 5.0
    grid_min: int | None = None
    grid_max: int | None = None
    max_weight: float = 10.0

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 != 1:
            raise RangeError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if self.alpha <= 0 or self.beta <= 0:
            raise RangeError("alpha and beta must be positive")
        if self.max_weight < 1:
            raise RangeError("max_weight must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def lds_kernel(cfg: LdsConfig) -> np.ndarray:
    """Beta(alpha, beta) density at kernel_size equally spaced interior points of (0, 1), summing to 1."""
    points = np.arange(1, cfg.kernel_size + 1) / (cfg.kernel_size + 1)
    kernel = stats.beta.pdf(points, cfg.alpha, cfg.beta)
    return kernel / kernel.sum()


def label_grid(labels: np.ndarray, cfg: LdsConfig) -> tuple[int, int]:
    lo = int(np.floor(labels.min())) if cfg.grid_min is None else cfg.grid_min
    hi = int(np.ceil(labels.max())) if cfg.grid_max is None else cfg.grid_max
    if lo > hi:
        raise RangeError(f"empty label grid [{lo}, {hi}]")
    return lo, hi


def effective_density(labels, cfg: LdsConfig | None = None) -> tuple[np.ndarray, int]:
    """Smoothed label histogram over integer bins and the grid origin."""
    cfg = cfg or LdsConfig()
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise DegenerateBatchError("lds_weights needs at least one label")
    lo, hi = label_grid(labels, cfg)
    bins = np.rint(labels).astype(int) - lo
    if bins.min() < 0 or bins.max() > hi - lo:
        raise RangeError(f"labels outside the grid [{lo}, {hi}]")
    hist = np.bincount(bins, minlength=hi - lo + 1).astype(np.float64)
    return ndimage.convolve1d(hist, lds_kernel(cfg), mode="reflect"), lo


def lds_weights(labels, cfg: LdsConfig | None = None) -> np.ndarray:
    """Inverse effective-density weights, mean 1, capped at ``max_weight`` and renormalized."""
    cfg = cfg or LdsConfig()
    density, lo = effective_density(labels, cfg)
    bins = np.rint(np.asarray(labels, dtype=np.float64)).astype(int) - lo
    weights = 1.0 / density[bins]
    weights /= weights.mean()
    weights = np.minimum(weights, cfg.max_weight)
    return weights / weights.mean()
