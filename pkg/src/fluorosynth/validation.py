"""Input checks shared by the estimators and the CLI."""
from __future__ import annotations

import numpy as np


def check_image_stack(X, name: str = "X", min_size: int = 1, multiple_of: int = 1) -> np.ndarray:
    """Return ``X`` as a float32 (n, H, W) stack in [0, 1], accepting (H, W) and (n, 1, H, W)."""
    arr = np.asarray(X)
    if arr.dtype == object or not np.issubdtype(arr.dtype, np.number):
        raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n, H, W), got shape {np.shape(X)}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    h, w = arr.shape[1:]
    if min(h, w) < min_size:
        raise ValueError(f"{name} images are {h}x{w}; at least {min_size}x{min_size} required")
    if h % multiple_of or w % multiple_of:
        raise ValueError(f"{name} extents {h}x{w} must be divisible by {multiple_of}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must be normalized to [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def check_paired(X, y, **kw) -> tuple[np.ndarray, np.ndarray]:
    X = check_image_stack(X, "X", **kw)
    y = check_image_stack(y, "y", **kw)
    if X.shape != y.shape:
        raise ValueError(f"X {X.shape} and y {y.shape} must pair up one-to-one")
    return X, y


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)
