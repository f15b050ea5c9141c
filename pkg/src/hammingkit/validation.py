"""Small input-validation helpers used by the public entry points.

Everything raises :class:`~hammingkit.errors.ContractViolation` (a
``ValueError`` subclass) so callers can catch one type for bad input.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from .errors import ContractViolation


def require(condition: bool, message: str) -> None:
    """Raise :class:`ContractViolation` with ``message`` unless ``condition``."""
    if not condition:
        raise ContractViolation(message)


def as_feature_matrix(X: Any, *, dim: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce ``X`` to a 2-D float64 array of feature rows.

    A single feature vector must be passed as a 1-row matrix; this keeps the
    "rows are samples" convention unambiguous.
    """
    arr = np.asarray(X, dtype=np.float64)
    require(arr.ndim == 2, f"{name} must be a 2-D array of feature rows, got ndim={arr.ndim}")
    require(arr.shape[0] >= 1, f"{name} must contain at least one row")
    require(np.isfinite(arr).all(), f"{name} must be finite")
    if dim is not None:
        require(
            arr.shape[1] == dim,
            f"{name} has {arr.shape[1]} features, expected {dim}",
        )
    return arr


def as_feature_vector(h: Any, *, dim: int | None = None, name: str = "h") -> np.ndarray:
    """Coerce ``h`` to a 1-D float64 feature vector."""
    arr = np.asarray(h, dtype=np.float64)
    require(arr.ndim == 1, f"{name} must be a 1-D feature vector, got ndim={arr.ndim}")
    require(np.isfinite(arr).all(), f"{name} must be finite")
    if dim is not None:
        require(arr.shape[0] == dim, f"{name} has length {arr.shape[0]}, expected {dim}")
    return arr


def as_label_vector(y: Any, *, n_classes: int | None = None, name: str = "y") -> np.ndarray:
    """Coerce ``y`` to a 1-D int64 vector of class indices and range-check it."""
    arr = np.asarray(y)
    require(arr.ndim == 1, f"{name} must be 1-D, got ndim={arr.ndim}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        as_float = np.asarray(arr, dtype=np.float64)
        require(
            np.all(as_float == np.round(as_float)),
            f"{name} must contain integer class indices",
        )
    arr = arr.astype(np.int64, copy=False)
    if arr.size:
        require(int(arr.min()) >= 0, f"{name} must be non-negative")
        if n_classes is not None:
            require(
                int(arr.max()) < n_classes,
                f"{name} contains index {int(arr.max())} but only {n_classes} classes exist",
            )
    return arr
