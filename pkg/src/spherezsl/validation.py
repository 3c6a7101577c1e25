"""Input validation helpers shared by the estimators and stage functions."""

from __future__ import annotations

import numpy as np


def check_feature_matrix(X, dim: int | None = None, name: str = "X") -> np.ndarray:
    """Coerce to a finite 2-D float64 array, optionally enforcing column count."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    if dim is not None and X.shape[1] != dim:
        raise ValueError(f"{name} has {X.shape[1]} columns, expected {dim}")
    return X


def check_labels(y, n_samples: int, n_classes: int | None = None, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n_samples:
        raise ValueError(f"{name} must be 1-D with {n_samples} entries, got shape {y.shape}")
    y = y.astype(np.int64)
    if len(y) and y.min() < 0:
        raise ValueError(f"{name} contains negative labels")
    if n_classes is not None and len(y) and y.max() >= n_classes:
        raise ValueError(f"{name} contains label {int(y.max())} >= {n_classes} classes")
    return y


def check_unit_rows(A, tol: float = 1e-6, name: str = "rows") -> np.ndarray:
    A = check_feature_matrix(A, name=name)
    norms = np.linalg.norm(A, axis=1)
    off = np.abs(norms - 1.0)
    if np.any(off > tol):
        worst = int(np.argmax(off))
        raise ValueError(f"{name}[{worst}] has norm {norms[worst]:.8f}, "
                         f"expected 1 within {tol}")
    return A


def unit_rows(A) -> np.ndarray:
    """Scale each row to unit norm (float64); zero rows raise."""
    A = check_feature_matrix(A)
    norms = np.linalg.norm(A, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero row")
    return A / norms


def rng_from_seed(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator; extra ints select an independent substream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))
