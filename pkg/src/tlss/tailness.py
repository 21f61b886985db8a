"""Instance tailness scoring, cluster-level aggregation, budget allocation,
and OOD sample selection.

An instance's raw score is the negated mean of exp(cosine similarity) over
all ordered pairs within the set formed by the instance and its K nearest
cosine neighbors; sparser neighborhoods score higher (closer to zero).
Scores are momentum-smoothed across refresh rounds, averaged per cluster,
and converted into integer per-cluster sampling budgets via a softmax over
standardized scores with largest-remainder rounding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .cluster import ClusterModel
from .errors import ConfigError
from .knn import cosine_matrix, top_k_cosine


@dataclass(frozen=True)
class TailnessConfig:
    n_neighbors: int = 10
    momentum: float = 0.9
    n_budget: int | None = None  # None: 10% of the OOD pool
    tau: float = 1.0

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ConfigError("n_neighbors must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must be in [0, 1]")
        if self.n_budget is not None and self.n_budget < 0:
            raise ConfigError("n_budget must be >= 0")
        if not self.tau > 0:
            raise ConfigError("budget tau must be > 0")

    def resolve_budget(self, pool_size: int) -> int:
        if self.n_budget is not None:
            return self.n_budget
        return int(round(0.1 * pool_size))


@dataclass(frozen=True)
class TailnessState:
    """Momentum-smoothed per-instance scores plus the raw scores that last
    updated them."""

    rho: float
    n_neighbors: int
    scores: np.ndarray | None = None
    raw_scores: np.ndarray | None = None
    last_update_epoch: int = -1

    @classmethod
    def fresh(cls, rho: float, n_neighbors: int) -> "TailnessState":
        if not 0.0 <= rho <= 1.0:
            raise ConfigError("rho must be in [0, 1]")
        if n_neighbors < 1:
            raise ConfigError("n_neighbors must be >= 1")
        return cls(rho=rho, n_neighbors=n_neighbors)


@dataclass(frozen=True)
class BudgetAllocation:
    budgets: np.ndarray  # (n_clusters,) int64
    total: int
    tau: float


def instance_tailness(embeddings: np.ndarray, k: int) -> np.ndarray:
    """Raw per-instance tailness scores from K-nearest cosine neighborhoods.

    Requires strictly more than k instances. All scores lie in [-e, ...),
    with -e attained when a neighborhood is fully collapsed.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    n = z.shape[0]
    if k < 1:
        raise ConfigError("k must be >= 1")
    if n <= k:
        raise ConfigError(f"need more than k={k} instances, got {n}")
    sims = cosine_matrix(z)
    neighbors = top_k_cosine(z, k)
    members = np.concatenate([np.arange(n)[:, None], neighbors], axis=1)  # (n, k+1)
    sub = sims[members[:, :, None], members[:, None, :]]  # (n, k+1, k+1)
    e = np.exp(sub)
    diag = e[:, np.arange(k + 1), np.arange(k + 1)]
    pair_sum = e.sum(axis=(1, 2)) - diag.sum(axis=1)
    return -pair_sum / (k * (k + 1))


def momentum_update(
    state: TailnessState, raw: np.ndarray, epoch: int
) -> TailnessState:
    """Blend new raw scores into the state: s = rho*s_prev + (1-rho)*raw.

    The first update adopts the raw scores unchanged. Updates must move
    forward in epochs.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ConfigError("raw tailness scores must be finite")
    if state.scores is None:
        return replace(
            state, scores=raw.copy(), raw_scores=raw.copy(), last_update_epoch=epoch
        )
    if epoch <= state.last_update_epoch:
        raise ConfigError(
            f"out-of-order tailness update: epoch {epoch} after "
            f"{state.last_update_epoch}"
        )
    if raw.shape != state.scores.shape:
        raise ConfigError("raw score vector changed length between updates")
    blended = state.rho * state.scores + (1.0 - state.rho) * raw
    return replace(
        state, scores=blended, raw_scores=raw.copy(), last_update_epoch=epoch
    )


def cluster_tailness(scores: np.ndarray, model: ClusterModel) -> np.ndarray:
    """Mean instance score per cluster; empty clusters get the global mean."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] != model.assignments.shape[0]:
        raise ConfigError("scores and assignments disagree in length")
    out = np.empty(model.n_clusters)
    fallback = float(scores.mean())
    for k in range(model.n_clusters):
        members = model.members(k)
        out[k] = scores[members].mean() if members.size else fallback
    return out


def allocate_budget(
    cluster_scores: np.ndarray, n_budget: int, tau: float
) -> BudgetAllocation:
    """Integer budgets proportional to softmax(standardized scores / tau).

    Largest-remainder rounding conserves the total exactly and never gives a
    strictly higher-scoring cluster a smaller budget.
    """
    s = np.asarray(cluster_scores, dtype=np.float64)
    if s.ndim != 1 or s.size < 1:
        raise ConfigError("cluster scores must be a non-empty 1-D vector")
    if n_budget < 0:
        raise ConfigError("n_budget must be >= 0")
    if not tau > 0:
        raise ConfigError("tau must be > 0")
    std = float(s.std())
    if std < 1e-12:
        z = np.zeros_like(s)
    else:
        z = (s - s.mean()) / std
    logits = z / tau
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()

    real = n_budget * p
    budgets = np.floor(real).astype(np.int64)
    remainder = int(n_budget - budgets.sum())
    if remainder > 0:
        frac = real - np.floor(real)
        order = np.lexsort((np.arange(s.size), -frac))
        budgets[order[:remainder]] += 1
    return BudgetAllocation(budgets=budgets, total=int(n_budget), tau=float(tau))


def sample_ood(
    ood_embeddings: np.ndarray,
    centroids: np.ndarray,
    budgets: np.ndarray,
    priority: np.ndarray | None = None,
) -> np.ndarray:
    """Pick, per cluster, the budgeted number of unused OOD samples nearest
    (L2) to the cluster centroid.

    Clusters draw in descending ``priority`` order (default: the budgets
    themselves), so higher-priority clusters get first pick when the same
    OOD sample is near several centroids. Returns sorted unique indices.
    """
    z = np.asarray(ood_embeddings, dtype=np.float64)
    budgets = np.asarray(budgets, dtype=np.int64)
    n_clusters = centroids.shape[0]
    if budgets.shape != (n_clusters,):
        raise ConfigError("budgets length must match the number of clusters")
    if np.any(budgets < 0):
        raise ConfigError("budgets must be non-negative")
    total = int(budgets.sum())
    if total > z.shape[0]:
        raise ConfigError(
            f"OOD pool too small: need {total}, have {z.shape[0]}"
        )
    if priority is None:
        priority = budgets.astype(np.float64)
    priority = np.asarray(priority, dtype=np.float64)

    diff = centroids[:, None, :] - z[None, :, :]
    d2 = np.sum(diff * diff, axis=2)  # (n_clusters, n_pool)
    nearest_order = np.argsort(d2, axis=1, kind="stable")

    available = np.ones(z.shape[0], dtype=bool)
    selected: list[int] = []
    for k in np.lexsort((np.arange(n_clusters), -priority)):
        want = int(budgets[k])
        if want == 0:
            continue
        taken = 0
        for idx in nearest_order[k]:
            if available[idx]:
                available[idx] = False
                selected.append(int(idx))
                taken += 1
                if taken == want:
                    break
    return np.sort(np.asarray(selected, dtype=np.int64))


def write_scores_csv(
    path: str | Path,
    scores: np.ndarray,
    assignments: np.ndarray,
    budgets: np.ndarray,
) -> None:
    """Dump per-instance scores with their cluster and that cluster's budget."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "score", "cluster", "budget"])
        for i, (s, c) in enumerate(zip(scores, assignments)):
            writer.writerow([i, repr(float(s)), int(c), int(budgets[int(c)])])
