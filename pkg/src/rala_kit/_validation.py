"""Input checks shared by the estimators and the CLI."""

import numpy as np

from .linalg import DimensionError


def check_tokens(X, name="X"):
    """Return ``X`` as a finite float64 token matrix ``(N, C)`` or stack ``(B, N, C)``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim not in (2, 3):
        raise DimensionError(f"{name} must be (N, C) or (B, N, C), got shape {X.shape}")
    if X.shape[-2] < 1 or X.shape[-1] < 1:
        raise DimensionError(f"{name} is empty: shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def check_images(X, name="X"):
    """Return ``X`` as finite float64 images ``(n, H, W, 3)`` with H, W multiples of 32."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise DimensionError(f"{name} must be images of shape (n, H, W, 3), got {X.shape}")
    h, w = X.shape[1:3]
    if h != w:
        raise DimensionError(f"{name} must be square, got {h}x{w}")
    if h % 32:
        raise DimensionError(f"{name} resolution {h} is not divisible by 32")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    return X


def check_labels(y, n):
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"y must be a 1-D array of length {n}, got shape {y.shape}")
    return y
