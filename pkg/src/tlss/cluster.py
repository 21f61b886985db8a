"""Embedding clustering: k-means initialization refined by minimizing the
KL divergence between a Student's-t soft assignment and a sharpened target
distribution, with hard assignments by L2-nearest centroid.

With one degree of freedom the soft assignment is
    q_ik = (1 + ||z_i - mu_k||^2)^-1 / sum_k' (1 + ||z_i - mu_k'||^2)^-1
and the per-minibatch target sharpens confident assignments while
normalizing by soft cluster frequency:
    p_ik = (q_ik^2 / h_k) / sum_k' (q_ik'^2 / h_k'),  h_k = sum_i q_ik.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError


@dataclass(frozen=True)
class ClusterConfig:
    n_clusters: int = 10
    change_threshold: float = 0.001
    max_epochs: int = 100
    lr: float = 0.1
    batch_size: int = 256

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError("n_clusters must be >= 1")
        if not 0.0 < self.change_threshold <= 1.0:
            raise ConfigError("change_threshold must be in (0, 1]")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not self.lr > 0:
            raise ConfigError("cluster lr must be > 0")
        if self.batch_size < 1:
            raise ConfigError("cluster batch_size must be >= 1")


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (n_clusters, dim)
    assignments: np.ndarray  # (n,) int64
    n_clusters: int

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == k)


@dataclass
class RefineResult:
    model: ClusterModel
    epoch_losses: list[float] = field(default_factory=list)
    changed_fractions: list[float] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.epoch_losses)


def _sq_dists(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def hard_assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """L2-nearest centroid per row; ties go to the lowest cluster index."""
    return np.argmin(_sq_dists(x, centroids), axis=1).astype(np.int64)


def kmeans_init(x: np.ndarray, n_clusters: int, seed: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding, at most 100 iterations or
    until assignments stop changing. Deterministic given the seed."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < n_clusters:
        raise ConfigError(f"need at least {n_clusters} points, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((n_clusters, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for k in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[k] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centroids[k]) ** 2, axis=1))

    assign = hard_assign(x, centroids)
    for _ in range(100):
        for k in range(n_clusters):
            mask = assign == k
            if np.any(mask):
                centroids[k] = x[mask].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its
                # current centroid.
                far = int(np.argmax(np.min(_sq_dists(x, centroids), axis=1)))
                centroids[k] = x[far]
        new_assign = hard_assign(x, centroids)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return centroids


def soft_assign(x: np.ndarray, centroids: np.ndarray, dof: float = 1.0) -> np.ndarray:
    """Student's-t soft assignment matrix Q; rows sum to one."""
    if not dof > 0:
        raise ConfigError("degrees of freedom must be > 0")
    d2 = _sq_dists(np.asarray(x, dtype=np.float64), centroids)
    w = (1.0 + d2 / dof) ** (-(dof + 1.0) / 2.0)
    return w / w.sum(axis=1, keepdims=True)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """Sharpened, frequency-normalized target P for a minibatch Q."""
    q = np.asarray(q, dtype=np.float64)
    h = q.sum(axis=0)
    a = q * q / h
    return a / a.sum(axis=1, keepdims=True)


def kl_cluster_loss(p: np.ndarray, q: np.ndarray) -> float:
    """Mean row-wise KL(P || Q); zero rows of p contribute 0 * log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ConfigError(f"P shape {p.shape} != Q shape {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
    return float(terms.sum() / p.shape[0])


def _centroid_grad(
    x: np.ndarray, centroids: np.ndarray, p: np.ndarray, q: np.ndarray
) -> np.ndarray:
    """Gradient of the KL loss w.r.t. centroids, P held fixed (dof = 1)."""
    d2 = _sq_dists(x, centroids)
    w = 1.0 / (1.0 + d2)
    coef = w * (p - q)  # (B, K)
    b = x.shape[0]
    return -(2.0 / b) * (coef.T @ x - coef.sum(axis=0)[:, None] * centroids)


def refine(
    x: np.ndarray,
    init_centroids: np.ndarray,
    change_threshold: float = 0.001,
    max_epochs: int = 100,
    lr: float = 0.1,
    batch_size: int = 256,
) -> RefineResult:
    """Descend the KL loss over sequential minibatches until the fraction of
    changed hard assignments between epochs drops below the threshold."""
    if not 0.0 < change_threshold <= 1.0:
        raise ConfigError("change_threshold must be in (0, 1]")
    if max_epochs < 1:
        raise ConfigError("max_epochs must be >= 1")
    if not lr > 0:
        raise ConfigError("lr must be > 0")
    x = np.asarray(x, dtype=np.float64)
    centroids = np.array(init_centroids, dtype=np.float64, copy=True)
    n_clusters = centroids.shape[0]
    n = x.shape[0]
    if n < 1:
        raise ConfigError("cannot refine on an empty embedding set")

    prev = hard_assign(x, centroids)
    result = RefineResult(model=ClusterModel(centroids, prev, n_clusters))
    for _ in range(max_epochs):
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, batch_size):
            batch = x[start : start + batch_size]
            q = soft_assign(batch, centroids)
            p = target_distribution(q)
            loss = kl_cluster_loss(p, q)
            if not np.isfinite(loss):
                raise NumericError("non-finite clustering loss")
            centroids -= lr * _centroid_grad(batch, centroids, p, q)
            loss_sum += loss
            n_batches += 1
        assign = hard_assign(x, centroids)
        changed = float(np.mean(assign != prev))
        prev = assign
        result.epoch_losses.append(loss_sum / n_batches)
        result.changed_fractions.append(changed)
        if changed < change_threshold:
            break
    result.model = ClusterModel(centroids, prev, n_clusters)
    return result


def refine_with_config(x: np.ndarray, init_centroids: np.ndarray, cfg: ClusterConfig) -> RefineResult:
    return refine(
        x,
        init_centroids,
        change_threshold=cfg.change_threshold,
        max_epochs=cfg.max_epochs,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
    )
