"""Exact cosine-similarity nearest-neighbor search (desk scale, dense)."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

_EPS = 1e-12


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), _EPS)
    return x / norms


def cosine_matrix(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Pairwise cosine similarities between rows of x and rows of y (or x)."""
    xn = l2_normalize_rows(x)
    yn = xn if y is None else l2_normalize_rows(y)
    return xn @ yn.T


def top_k_cosine(
    x: np.ndarray,
    k: int,
    groups: np.ndarray | None = None,
) -> np.ndarray:
    """Indices of each row's k most cosine-similar other rows.

    With ``groups`` given, candidates are restricted to rows in the same
    group. A row is never its own neighbor; ties break toward the lower
    index. Returns an (n, k) int array.
    """
    n = x.shape[0]
    if k < 0:
        raise ConfigError("k must be >= 0")
    if k == 0:
        return np.zeros((n, 0), dtype=np.int64)
    sims = cosine_matrix(x)
    np.fill_diagonal(sims, -np.inf)
    if groups is not None:
        groups = np.asarray(groups)
        same = groups[:, None] == groups[None, :]
        sims[~same] = -np.inf
        counts = np.bincount(np.unique(groups, return_inverse=True)[1])
        if np.any(counts <= k):
            raise ConfigError(
                f"every group needs more than k={k} members for k-NN"
            )
    elif n <= k:
        raise ConfigError(f"need more than k={k} rows for k-NN")
    # Stable sort on -sims makes ties resolve to the lower index.
    order = np.argsort(-sims, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)
