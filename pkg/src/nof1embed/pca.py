"""Principal components of an embedding matrix via SVD of the centred data."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, UsageError


@dataclass
class PCAModel:
    """Fitted PCA.

    Attributes
    ----------
    mean : ndarray, shape (k,)
    components : ndarray, shape (m, k)
        Orthonormal rows, sorted by decreasing eigenvalue.  Each row's
        largest-magnitude coordinate is positive.
    eigenvalues : ndarray, shape (m,)
        Variances along the components (1/(n-1) normalisation).
    explained_variance_ratio : ndarray, shape (m,)
    """

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    explained_variance_ratio: np.ndarray
    n_samples: int


def _orient(components: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit(X, n_components: int | None = None) -> PCAModel:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise UsageError(f"PCA expects a 2-D matrix, got shape {X.shape}")
    n, k = X.shape
    if n < 2:
        raise UsageError(f"PCA needs at least 2 rows, got {n}")
    if not np.all(np.isfinite(X)):
        raise UsageError("PCA input contains NaN or Inf")
    mean = X.mean(axis=0)
    Xc = X - mean
    m = min(n, k) if n_components is None else int(n_components)
    if not 1 <= m <= min(n, k):
        raise ConfigError(f"n_components must be in [1, {min(n, k)}], got {n_components}")

    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    eig = np.maximum(s**2 / (n - 1), 0.0)
    total = eig.sum()
    if total <= 0.0:
        warnings.warn("zero-variance input: components set to the coordinate axes", stacklevel=2)
        comps = np.eye(k)[:m]
        eig = np.zeros(m)
        ratio = np.zeros(m)
    else:
        comps = _orient(vt[:m])
        ratio = eig[:m] / total
        eig = eig[:m]
    return PCAModel(mean, comps, eig, ratio, n)


def transform(model: PCAModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise UsageError(f"expected (n, {model.mean.shape[0]}) input, got {X.shape}")
    return (X - model.mean) @ model.components.T


def first_component_scores(model: PCAModel, X) -> np.ndarray:
    return transform(model, X)[:, 0]


def inverse_transform(model: PCAModel, scores) -> np.ndarray:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    m = scores.shape[1]
    return scores @ model.components[:m] + model.mean
