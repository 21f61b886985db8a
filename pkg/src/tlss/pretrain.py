"""Stage-1 contrastive pretraining on merged ID + sampled OOD data.

Every ``refresh_period`` epochs the loop re-embeds all ID data, reclusters,
rescores tailness, reallocates the OOD budget, resamples the OOD subset, and
rebuilds the per-domain neighbor index over the merged set. Between
refreshes it trains on stratified minibatches with two losses:

* a neighbor-positive contrastive term where an instance's positives are its
  augmented view plus the stored embeddings of its same-domain nearest
  neighbors, against the other minibatch members as negatives:
      L = -mean_i log( sum_pos exp(z_i.z_j / tau) / sum_neg exp(z_i.z_j / tau) )
* a domain contrastive term that pulls same-domain pairs together against
  different-domain members:
      L = -mean_i mean_{p in same_i} log( exp(z_i.z_p/tau)
              / (exp(z_i.z_p/tau) + sum_{n in diff_i} exp(z_i.z_n/tau)) )

The combined objective is the first term plus ``alpha`` times the second.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import encoder as enc
from .cluster import ClusterConfig, kmeans_init, refine_with_config
from .data import Dataset, Domain
from .errors import ConfigError, NumericError
from .knn import top_k_cosine
from .rng import stream
from .tailness import (
    TailnessConfig,
    TailnessState,
    allocate_budget,
    cluster_tailness,
    instance_tailness,
    momentum_update,
    sample_ood,
)

LOG_COLUMNS = ("epoch", "L_PSD", "L_DD", "L_CPT", "n_ood_sampled")


@dataclass(frozen=True)
class PretrainConfig:
    n_positive_neighbors: int = 3  # 0 disables neighbor positives
    alpha: float = 0.3
    tau: float = 0.5
    refresh_period: int = 10
    batch_size: int = 128
    epochs: int = 60
    lr: float = 0.05
    momentum: float = 0.9
    jitter_sigma: float = 0.3
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_positive_neighbors < 0:
            raise ConfigError("n_positive_neighbors must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if self.refresh_period < 1:
            raise ConfigError("refresh_period must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must be in [0, 1)")
        if self.jitter_sigma < 0:
            raise ConfigError("jitter_sigma must be >= 0")
        if not 0.0 <= self.dropout_rate <= 1.0:
            raise ConfigError("dropout_rate must be in [0, 1]")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class PretrainResult:
    params: enc.EncoderParams
    log: list[dict] = field(default_factory=list)
    n_refreshes: int = 0


def build_neighbor_index(
    embeddings: np.ndarray, domains: np.ndarray, k: int
) -> np.ndarray:
    """Exact per-domain cosine k-NN over the merged set; (n, k) indices."""
    return top_k_cosine(embeddings, k, groups=np.asarray(domains))


def augment(
    features: np.ndarray,
    rng: np.random.Generator,
    jitter_sigma: float,
    dropout_rate: float,
) -> np.ndarray:
    """Additive Gaussian jitter followed by random coordinate dropout."""
    x = np.asarray(features, dtype=np.float64)
    out = x + jitter_sigma * rng.standard_normal(x.shape)
    if dropout_rate > 0:
        out = np.where(rng.random(x.shape) < dropout_rate, 0.0, out)
    return out


def _masked_row_max(s: np.ndarray, mask: np.ndarray) -> np.ndarray:
    masked = np.where(mask, s, -np.inf)
    return masked.max(axis=1, keepdims=True)


def semantic_contrast_loss(
    anchors: np.ndarray,
    bank: np.ndarray,
    pos_mask: np.ndarray,
    neg_mask: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Positive-sum over negative-sum contrastive loss with exact adjoints.

    Returns (loss, d_anchors, d_bank). Masks are (n_anchors, n_bank)
    booleans; every anchor needs at least one positive and one negative.
    The log-ratio form is unbounded below, so the value may be negative.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    pos_mask = np.asarray(pos_mask, dtype=bool)
    neg_mask = np.asarray(neg_mask, dtype=bool)
    b = anchors.shape[0]
    if pos_mask.shape != (b, bank.shape[0]) or neg_mask.shape != pos_mask.shape:
        raise ConfigError("mask shapes must be (n_anchors, n_bank)")
    if not (pos_mask.any(axis=1).all() and neg_mask.any(axis=1).all()):
        raise ConfigError("every anchor needs >= 1 positive and >= 1 negative")
    if not tau > 0:
        raise ConfigError("tau must be > 0")

    s = anchors @ bank.T / tau
    shift = _masked_row_max(s, pos_mask | neg_mask)
    e = np.exp(s - shift)
    pos_sum = np.where(pos_mask, e, 0.0).sum(axis=1, keepdims=True)
    neg_sum = np.where(neg_mask, e, 0.0).sum(axis=1, keepdims=True)
    # The shift cancels inside log(pos_sum / neg_sum).
    loss = float(-(np.log(pos_sum) - np.log(neg_sum)).mean())

    ds = -(pos_mask * e / pos_sum - neg_mask * e / neg_sum) / b
    d_anchors = ds @ bank / tau
    d_bank = ds.T @ anchors / tau
    return loss, d_anchors, d_bank


def domain_contrast_loss(
    anchors: np.ndarray,
    bank: np.ndarray,
    same_mask: np.ndarray,
    diff_mask: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Same-domain-vs-different-domain contrastive loss with adjoints.

    Each same-domain partner p of anchor i contributes
    -log(exp(s_ip) / (exp(s_ip) + sum_diff exp(s_in))), averaged per anchor
    and over anchors. Always non-negative.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    bank = np.asarray(bank, dtype=np.float64)
    same_mask = np.asarray(same_mask, dtype=bool)
    diff_mask = np.asarray(diff_mask, dtype=bool)
    b = anchors.shape[0]
    if same_mask.shape != (b, bank.shape[0]) or diff_mask.shape != same_mask.shape:
        raise ConfigError("mask shapes must be (n_anchors, n_bank)")
    if not (same_mask.any(axis=1).all() and diff_mask.any(axis=1).all()):
        raise ConfigError(
            "every anchor needs same-domain and different-domain partners "
            "(is the batch single-domain?)"
        )
    if not tau > 0:
        raise ConfigError("tau must be > 0")

    s = anchors @ bank.T / tau
    shift = _masked_row_max(s, same_mask | diff_mask)
    e = np.exp(s - shift)
    diff_sum = np.where(diff_mask, e, 0.0).sum(axis=1, keepdims=True)
    n_same = same_mask.sum(axis=1, keepdims=True)

    denom = e + diff_sum  # meaningful where same_mask
    with np.errstate(divide="ignore", invalid="ignore"):
        log_terms = np.where(same_mask, np.log(e) - np.log(denom), 0.0)
    loss = float(-(log_terms.sum(axis=1, keepdims=True) / n_same).mean())

    inv_denom = np.where(same_mask, 1.0 / denom, 0.0)
    sigma = e * inv_denom
    ds = -(same_mask * (1.0 - sigma)) / n_same / b
    ds += diff_mask * e * (inv_denom.sum(axis=1, keepdims=True) / n_same) / b
    d_anchors = ds @ bank / tau
    d_bank = ds.T @ anchors / tau
    return loss, d_anchors, d_bank


def domain_masks(domains: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Self-excluding same/different-domain masks for a minibatch."""
    d = np.asarray(domains)
    same = d[:, None] == d[None, :]
    eye = np.eye(d.size, dtype=bool)
    return same & ~eye, ~same


def combined_pretrain_loss(semantic: float, domain: float, alpha: float) -> float:
    return semantic + alpha * domain


def stratified_batch_indices(
    rng: np.random.Generator,
    id_indices: np.ndarray,
    ood_indices: np.ndarray,
    batch_size: int,
) -> np.ndarray:
    """Sample a minibatch with at least two members from each non-empty
    domain, proportional to domain sizes on the merged set."""
    n_id, n_ood = len(id_indices), len(ood_indices)
    if n_ood == 0:
        take = min(batch_size, n_id)
        return rng.choice(id_indices, size=take, replace=False)
    if n_id == 0:
        take = min(batch_size, n_ood)
        return rng.choice(ood_indices, size=take, replace=False)
    if n_id < 2 or n_ood < 2:
        raise ConfigError("stratified batches need >= 2 samples per domain")
    b = min(batch_size, n_id + n_ood)
    if b < 4:
        raise ConfigError("batch_size must be >= 4 when both domains are present")
    ood_quota = int(round(b * n_ood / (n_id + n_ood)))
    ood_quota = max(2, min(ood_quota, b - 2, n_ood))
    id_quota = b - ood_quota
    if id_quota > n_id:
        ood_quota += id_quota - n_id
        id_quota = n_id
    return np.concatenate(
        [
            rng.choice(id_indices, size=id_quota, replace=False),
            rng.choice(ood_indices, size=ood_quota, replace=False),
        ]
    )


def _psd_masks(
    batch_pos: np.ndarray,  # positions of batch members in the merged set
    neighbors: np.ndarray,  # (n_merged, k) merged-set neighbor indices
    k_pos: int,
) -> tuple[np.ndarray, np.ndarray]:
    b = batch_pos.shape[0]
    n_bank = 2 * b + b * k_pos
    pos = np.zeros((b, n_bank), dtype=bool)
    rows = np.arange(b)
    pos[rows, b + rows] = True  # each anchor's augmented view
    if k_pos > 0:
        cols = 2 * b + (rows[:, None] * k_pos + np.arange(k_pos)[None, :])
        pos[rows[:, None], cols] = True
    neg = np.zeros((b, n_bank), dtype=bool)
    neg[:, :b] = ~np.eye(b, dtype=bool)
    if k_pos > 0:
        batch_nbrs = neighbors[batch_pos]  # (b, k_pos)
        is_neighbor = (batch_nbrs[:, :, None] == batch_pos[None, None, :]).any(axis=1)
        neg[:, :b] &= ~is_neighbor
    return pos, neg


def run_pretrain(
    id_data: Dataset,
    ood_pool: Dataset | None,
    encoder_config: enc.EncoderConfig,
    cluster_config: ClusterConfig,
    tailness_config: TailnessConfig,
    config: PretrainConfig,
    on_refresh: Callable[[int, enc.EncoderParams], None] | None = None,
) -> PretrainResult:
    """Train the stage-1 encoder; deterministic given config seeds.

    With ``ood_pool`` set to None (or empty) the loop degrades to ID-only
    training: no clustering/tailness/sampling, no domain loss (alpha must
    then be 0), plain ID minibatches.
    """
    use_ood = ood_pool is not None and len(ood_pool) > 0
    if not use_ood and config.alpha > 0:
        raise ConfigError("alpha > 0 requires an OOD pool")
    if use_ood and id_data.dim != ood_pool.dim:
        raise ConfigError(
            f"ID dim {id_data.dim} != OOD dim {ood_pool.dim}"
        )
    if encoder_config.input_dim != id_data.dim:
        raise ConfigError("encoder input_dim must match the dataset dim")

    params = enc.init_params(encoder_config)
    velocity = enc.zero_velocity(params)
    state = TailnessState.fresh(tailness_config.momentum, tailness_config.n_neighbors)
    rng_batch = stream(config.seed, "batching")
    rng_aug = stream(config.seed, "augmentation")
    rng_cluster = stream(config.seed, "cluster")

    x_id = id_data.features.astype(np.float64)
    x_ood = ood_pool.features.astype(np.float64) if use_ood else None
    k_pos = config.n_positive_neighbors

    merged_x = x_id
    merged_domains = np.zeros(len(x_id), dtype=np.int64)
    stored_embeddings = None
    neighbors = None
    n_sampled = 0
    result = PretrainResult(params=params)

    for epoch in range(config.epochs):
        if epoch % config.refresh_period == 0:
            z_id = enc.forward(params, x_id)
            if use_ood:
                km_seed = int(rng_cluster.integers(0, 2**63 - 1))
                centroids0 = kmeans_init(z_id, cluster_config.n_clusters, km_seed)
                refined = refine_with_config(z_id, centroids0, cluster_config)
                raw = instance_tailness(z_id, tailness_config.n_neighbors)
                state = momentum_update(state, raw, epoch)
                per_cluster = cluster_tailness(state.scores, refined.model)
                budget = allocate_budget(
                    per_cluster,
                    tailness_config.resolve_budget(len(ood_pool)),
                    tailness_config.tau,
                )
                z_ood = enc.forward(params, x_ood)
                selected = sample_ood(
                    z_ood, refined.model.centroids, budget.budgets, priority=per_cluster
                )
                n_sampled = int(selected.size)
                merged_x = np.vstack([x_id, x_ood[selected]])
                merged_domains = np.concatenate(
                    [
                        np.zeros(len(x_id), dtype=np.int64),
                        np.ones(n_sampled, dtype=np.int64),
                    ]
                )
                stored_embeddings = np.vstack([z_id, z_ood[selected]])
            else:
                stored_embeddings = z_id
            if k_pos > 0:
                neighbors = build_neighbor_index(
                    stored_embeddings, merged_domains, k_pos
                )
            else:
                neighbors = np.zeros((len(merged_x), 0), dtype=np.int64)
            result.n_refreshes += 1
            if on_refresh is not None:
                on_refresh(epoch, params)

        id_pos = np.flatnonzero(merged_domains == 0)
        ood_pos = np.flatnonzero(merged_domains == 1)
        n_merged = len(merged_x)
        steps = max(1, math.ceil(n_merged / config.batch_size))
        sem_sum = dom_sum = 0.0
        for _ in range(steps):
            batch_pos = stratified_batch_indices(
                rng_batch, id_pos, ood_pos, config.batch_size
            )
            xb = merged_x[batch_pos]
            xa = augment(xb, rng_aug, config.jitter_sigma, config.dropout_rate)
            zb = enc.forward(params, xb)
            za = enc.forward(params, xa)
            b = len(batch_pos)

            bank_parts = [zb, za]
            if k_pos > 0:
                bank_parts.append(
                    stored_embeddings[neighbors[batch_pos].ravel()]
                )
            bank = np.vstack(bank_parts)
            pos_mask, neg_mask = _psd_masks(batch_pos, neighbors, k_pos)
            sem, d_anchor, d_bank = semantic_contrast_loss(
                zb, bank, pos_mask, neg_mask, config.tau
            )
            dzb = d_anchor + d_bank[:b]
            dza = d_bank[b : 2 * b]

            dom = 0.0
            if use_ood:
                same_m, diff_m = domain_masks(merged_domains[batch_pos])
                dom, dd_anchor, dd_bank = domain_contrast_loss(
                    zb, zb, same_m, diff_m, config.tau
                )
                if config.alpha > 0:
                    dzb += config.alpha * (dd_anchor + dd_bank)

            total = combined_pretrain_loss(sem, dom, config.alpha)
            if not np.isfinite(total):
                raise NumericError(f"non-finite pretraining loss at epoch {epoch}")
            grads = enc.add_grads(
                enc.grad(params, xb, dzb), enc.grad(params, xa, dza)
            )
            params, velocity = enc.sgd_step(
                params, grads, config.lr, config.momentum, velocity
            )
            sem_sum += sem
            dom_sum += dom

        sem_mean = sem_sum / steps
        dom_mean = dom_sum / steps
        result.log.append(
            {
                "epoch": epoch,
                "L_PSD": sem_mean,
                "L_DD": dom_mean,
                "L_CPT": combined_pretrain_loss(sem_mean, dom_mean, config.alpha),
                "n_ood_sampled": n_sampled if use_ood else 0,
            }
        )

    result.params = params
    return result


def write_pretrain_log(path: str | Path, log: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)
        for row in log:
            writer.writerow(
                [
                    row["epoch"],
                    repr(float(row["L_PSD"])),
                    repr(float(row["L_DD"])),
                    repr(float(row["L_CPT"])),
                    row["n_ood_sampled"],
                ]
            )
