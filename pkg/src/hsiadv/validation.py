"""Input validation helpers for array-shaped arguments.

These keep the estimator-style classes (`fit`/`transform`/`predict`) honest about
the cube layouts they accept: single patches are ``(C, h, h)``, batches are
``(n, C, h, h)``, values live in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import DataError


def as_float_array(x, dtype=None) -> np.ndarray:
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


def check_patch(x, name: str = "x") -> np.ndarray:
    """Validate a single (C, h, w) patch."""
    arr = as_float_array(x)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (bands, height, width), got {arr.shape}")
    return arr


def check_patch_batch(X, name: str = "X") -> np.ndarray:
    """Validate a (n, C, h, w) batch; a single (C, h, w) patch is promoted to n=1."""
    arr = as_float_array(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ValueError(f"{name} must have shape (n, bands, height, width), got {arr.shape}")
    return arr


def check_unit_range(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise DataError(f"{name} has values outside [0, 1]")
    return arr


def check_labels(y, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(arr == arr.astype(np.int64)):
            raise ValueError(f"{name} must hold integer class ids")
        arr = arr.astype(np.int64)
    return arr.astype(np.int64, copy=False)
