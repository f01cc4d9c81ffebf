"""Input-processing defenses: random noise injection and spectral smoothing.

Both operate on [0, 1] patches and preserve shape and range; they are applied
to (possibly adversarial) examples before classification to wash out crafted
perturbations.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .seeding import DEFENSE, derive_rng
from .validation import check_patch_batch


def defend_noise(x, intensity: float, seed: int = 0) -> np.ndarray:
    """Add i.i.d. uniform noise in [-intensity, +intensity], clip to [0, 1]."""
    if intensity < 0:
        raise ValueError(f"intensity must be >= 0, got {intensity}")
    arr = np.asarray(x, dtype=np.float32)
    if intensity == 0:
        return arr.copy()
    rng = derive_rng(seed, DEFENSE)
    noise = rng.uniform(-intensity, intensity, size=arr.shape).astype(np.float32)
    return np.clip(arr + noise, 0.0, 1.0)


def defend_spectral_filter(x, window: int) -> np.ndarray:
    """Average filtering along the band axis with an odd window.

    Each band value is replaced by the mean over its band neighbourhood,
    truncated at the spectrum edges (mean over in-range neighbours only).
    Accepts (C, h, w) or (n, C, h, w); band axis is the one of size C.
    """
    arr = np.asarray(x, dtype=np.float32)
    band_axis = 0 if arr.ndim == 3 else 1
    c = arr.shape[band_axis]
    if window % 2 == 0 or window < 1:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window > c:
        raise ValueError(f"window {window} exceeds band count {c}")
    if window == 1:
        return arr.copy()
    half = window // 2
    moved = np.moveaxis(arr, band_axis, 0)
    csum = np.cumsum(moved, axis=0, dtype=np.float64)
    csum = np.concatenate([np.zeros_like(csum[:1]), csum], axis=0)
    out = np.empty_like(moved)
    for band in range(c):
        lo = max(0, band - half)
        hi = min(c, band + half + 1)
        out[band] = ((csum[hi] - csum[lo]) / (hi - lo)).astype(np.float32)
    return np.moveaxis(out, 0, band_axis)


class RandomNoiseDefense(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper around :func:`defend_noise`."""

    def __init__(self, intensity: float = 0.1, seed: int = 0):
        self.intensity = intensity
        self.seed = seed

    def fit(self, X, y=None):
        check_patch_batch(X)
        return self

    def transform(self, X) -> np.ndarray:
        arr = check_patch_batch(X)
        out = defend_noise(arr, self.intensity, self.seed)
        return out if np.asarray(X).ndim == 4 else out[0]


class SpectralSmoothingDefense(BaseEstimator, TransformerMixin):
    """Estimator-style wrapper around :func:`defend_spectral_filter`."""

    def __init__(self, window: int = 7):
        self.window = window

    def fit(self, X, y=None):
        check_patch_batch(X)
        return self

    def transform(self, X) -> np.ndarray:
        arr = check_patch_batch(X)
        out = defend_spectral_filter(arr, self.window)
        return out if np.asarray(X).ndim == 4 else out[0]
