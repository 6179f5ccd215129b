"""Input validation helpers shared by the estimator and the pipeline."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def check_array(x, name: str = "array", ndim: int | None = None,
                dtype=np.float64, allow_empty: bool = False) -> np.ndarray:
    """Coerce to a contiguous ndarray of `dtype` and validate finiteness."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-D, got {arr.ndim}-D shape {arr.shape}")
    if not allow_empty and arr.size == 0:
        raise DataError(f"{name} is empty")
    if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    return arr


def check_targets(y, n_labels: int | None = None) -> np.ndarray:
    """Validate an (n, L) target matrix over {0, 1, -1} (-1 = missing).

    A 1-D input is read as a single study's label vector.
    """
    arr = np.ascontiguousarray(y)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError(f"targets must be 2-D, got shape {arr.shape}")
    arr = arr.astype(np.int64)
    bad = ~np.isin(arr, (0, 1, -1))
    if bad.any():
        vals = sorted(set(np.asarray(arr)[bad].tolist()))
        raise DataError(f"targets must lie in {{0, 1, -1}}, found {vals}")
    if n_labels is not None and arr.shape[1] != n_labels:
        raise DataError(f"targets have {arr.shape[1]} columns, expected {n_labels}")
    return arr


def check_probabilities(p, name: str = "probabilities") -> np.ndarray:
    arr = check_array(p, name=name)
    if np.any(arr < 0) or np.any(arr > 1):
        raise DataError(f"{name} must lie in [0, 1]")
    return arr


def check_same_length(*arrays, names: tuple[str, ...] | None = None) -> None:
    lengths = [len(a) for a in arrays]
    if len(set(lengths)) > 1:
        label = names if names else tuple(f"array{i}" for i in range(len(arrays)))
        pairs = ", ".join(f"{n}={l}" for n, l in zip(label, lengths))
        raise DataError(f"length mismatch: {pairs}")


def check_binary_mask(m, name: str = "mask") -> np.ndarray:
    """Coerce to a {0, 1} float64 vector or grid."""
    arr = np.ascontiguousarray(m)
    uniq = np.unique(arr)
    if not np.all(np.isin(uniq, (0, 1))):
        raise DataError(f"{name} must be binary, found values {uniq[:8]}")
    return arr.astype(np.float64)
