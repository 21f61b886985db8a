"""Synthetic long-tailed datasets and dataset file I/O.

In-domain (ID) data is drawn from a Gaussian mixture with one component per
class, component means mutually separated by a configurable distance, and an
exponentially decaying per-class count profile. The OOD pool is a second
mixture whose component means sit at scaled midpoints between ID class means,
so part of the pool lands near tail-class regions.

Binary dataset format (little-endian):
  magic "TLSS" | version u16 = 1 | flags u16 (bit 0: labels present)
  | count u64 | dim u32
  | domain tag u8 per sample (0 = ID, 1 = OOD)
  | features f32 row-major (count x dim)
  | labels u32 per sample if flagged (0xFFFFFFFF = absent)

CSV import: one row per sample, feature columns first, optionally followed
by trailing ``label`` and/or ``domain`` columns (header row required).
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, TruncatedError

MAGIC = b"TLSS"
FORMAT_VERSION = 1
_NO_LABEL_U32 = 0xFFFFFFFF
_HEADER = struct.Struct("<4sHHQI")
_FLAG_LABELS = 1


class Domain(IntEnum):
    ID = 0
    OOD = 1


@dataclass(frozen=True)
class Sample:
    """A single feature vector with its domain tag and optional label."""

    features: np.ndarray
    domain: Domain
    class_label: int | None


@dataclass(frozen=True)
class LongTailSpec:
    """Parameters of the synthetic long-tailed ID generator.

    ``imbalance_ratio`` is the head-to-tail count ratio; 1.0 gives a
    balanced dataset. ``class_separation`` is the exact pairwise distance
    between class means.
    """

    n_classes: int
    max_per_class: int
    imbalance_ratio: float
    dim: int
    class_separation: float
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.n_classes < 1:
            raise ConfigError("n_classes must be >= 1")
        if self.max_per_class < 1:
            raise ConfigError("max_per_class must be >= 1")
        if not self.imbalance_ratio >= 1.0:
            raise ConfigError("imbalance_ratio must be >= 1")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.dim < self.n_classes:
            raise ConfigError(
                f"dim ({self.dim}) must be >= n_classes ({self.n_classes}) "
                "to place mutually equidistant class means"
            )
        if not self.class_separation > 0:
            raise ConfigError("class_separation must be > 0")
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass
class Dataset:
    """Ordered sample collection backed by flat arrays.

    ``labels`` stores -1 where a sample has no class label.
    """

    features: np.ndarray  # (n, dim) float32
    domains: np.ndarray  # (n,) uint8
    labels: np.ndarray  # (n,) int64, -1 = absent

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.domains = np.ascontiguousarray(self.domains, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        n = self.features.shape[0]
        if self.domains.shape != (n,) or self.labels.shape != (n,):
            raise DimensionError("domains/labels length must match feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ConfigError("features must be finite")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Sample:
        lab = int(self.labels[i])
        return Sample(
            features=self.features[i],
            domain=Domain(int(self.domains[i])),
            class_label=None if lab < 0 else lab,
        )

    @property
    def has_labels(self) -> bool:
        return bool(np.any(self.labels >= 0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.features.shape == other.features.shape
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.domains, other.domains)
            and np.array_equal(self.labels, other.labels)
        )


def concat(a: Dataset, b: Dataset) -> Dataset:
    if a.dim != b.dim:
        raise DimensionError(f"cannot concat dim {a.dim} with dim {b.dim}")
    return Dataset(
        features=np.vstack([a.features, b.features]),
        domains=np.concatenate([a.domains, b.domains]),
        labels=np.concatenate([a.labels, b.labels]),
    )


def subset(d: Dataset, indices: np.ndarray) -> Dataset:
    idx = np.asarray(indices, dtype=np.int64)
    return Dataset(d.features[idx], d.domains[idx], d.labels[idx])


def class_counts(spec: LongTailSpec) -> np.ndarray:
    """Per-class sample counts: round-half-up of max * ratio^(-c/(C-1)).

    Rejects specs where any class would round to zero samples.
    """
    c = np.arange(spec.n_classes, dtype=np.float64)
    if spec.n_classes == 1:
        expo = np.zeros(1)
    else:
        expo = -c / (spec.n_classes - 1)
    raw = spec.max_per_class * spec.imbalance_ratio**expo
    counts = np.floor(raw + 0.5).astype(np.int64)
    if np.any(counts < 1):
        raise ConfigError(
            "long-tail profile rounds a class count to 0; "
            "increase max_per_class or lower imbalance_ratio"
        )
    return counts


def class_means(spec: LongTailSpec) -> np.ndarray:
    """Class means on scaled coordinate axes, pairwise distance = separation."""
    scale = spec.class_separation / math.sqrt(2.0)
    means = np.zeros((spec.n_classes, spec.dim))
    means[np.arange(spec.n_classes), np.arange(spec.n_classes)] = scale
    return means


def gen_longtail(spec: LongTailSpec) -> Dataset:
    """Generate the long-tailed ID dataset described by ``spec``.

    Samples are grouped by class, class c drawn from an isotropic Gaussian
    at that class's mean. Pure function of the spec (seed included).
    """
    counts = class_counts(spec)
    means = class_means(spec)
    rng = np.random.default_rng(spec.seed)
    blocks = []
    labels = []
    for c, n_c in enumerate(counts):
        pts = means[c] + spec.noise_sigma * rng.standard_normal((int(n_c), spec.dim))
        blocks.append(pts)
        labels.append(np.full(int(n_c), c, dtype=np.int64))
    features = np.vstack(blocks).astype(np.float32)
    n = features.shape[0]
    return Dataset(
        features=features,
        domains=np.full(n, Domain.ID, dtype=np.uint8),
        labels=np.concatenate(labels),
    )


def ood_means(spec: LongTailSpec, ood_scale: float = 1.5) -> np.ndarray:
    """OOD mixture means: midpoints of consecutive ID class means, scaled
    outward so they are disjoint from (but close to) the ID components."""
    if spec.n_classes < 2:
        raise ConfigError("OOD generation needs at least 2 ID classes")
    means = class_means(spec)
    return ood_scale * 0.5 * (means[:-1] + means[1:])


def gen_ood(
    n: int,
    spec: LongTailSpec,
    ood_scale: float = 1.5,
    noise_sigma: float | None = None,
    seed: int = 0,
) -> Dataset:
    """Generate an OOD pool of ``n`` unlabeled samples near ID class gaps."""
    if n < 1:
        raise ConfigError("OOD pool size must be >= 1")
    if not ood_scale > 0:
        raise ConfigError("ood_scale must be > 0")
    sigma = spec.noise_sigma if noise_sigma is None else noise_sigma
    if not sigma > 0:
        raise ConfigError("noise sigma must be > 0")
    mids = ood_means(spec, ood_scale)
    rng = np.random.default_rng(seed)
    comp = rng.integers(0, mids.shape[0], size=n)
    features = mids[comp] + sigma * rng.standard_normal((n, spec.dim))
    return Dataset(
        features=features.astype(np.float32),
        domains=np.full(n, Domain.OOD, dtype=np.uint8),
        labels=np.full(n, -1, dtype=np.int64),
    )


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write ``dataset`` in the binary format documented at module top."""
    n = len(dataset)
    flags = _FLAG_LABELS if dataset.has_labels else 0
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, flags, n, dataset.dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dataset.domains.astype("<u1").tobytes())
        fh.write(dataset.features.astype("<f4").tobytes())
        if flags & _FLAG_LABELS:
            on_disk = np.where(
                dataset.labels >= 0, dataset.labels, _NO_LABEL_U32
            ).astype("<u4")
            fh.write(on_disk.tobytes())


def load_dataset(path: str | Path, expect_dim: int | None = None) -> Dataset:
    """Read a binary dataset file; exact inverse of :func:`save_dataset`."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedError(f"{path}: file shorter than header")
    magic, version, flags, count, dim = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if flags & ~_FLAG_LABELS:
        raise FormatError(f"{path}: unknown flag bits {flags:#x}")
    if dim < 1:
        raise DimensionError(f"{path}: declared dim {dim} is invalid")
    if expect_dim is not None and dim != expect_dim:
        raise DimensionError(f"{path}: dim {dim}, expected {expect_dim}")

    need = _HEADER.size + count * (1 + 4 * dim) + (4 * count if flags else 0)
    if len(blob) < need:
        raise TruncatedError(
            f"{path}: payload truncated ({len(blob)} bytes, need {need})"
        )
    if len(blob) > need:
        raise FormatError(f"{path}: {len(blob) - need} trailing bytes")

    off = _HEADER.size
    domains = np.frombuffer(blob, dtype="<u1", count=count, offset=off)
    off += count
    features = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=off)
    off += 4 * count * dim
    if np.any(domains > 1):
        raise FormatError(f"{path}: invalid domain tag")
    if flags & _FLAG_LABELS:
        raw = np.frombuffer(blob, dtype="<u4", count=count, offset=off)
        labels = np.where(raw == _NO_LABEL_U32, -1, raw.astype(np.int64))
    else:
        labels = np.full(count, -1, dtype=np.int64)
    return Dataset(
        features=features.reshape(count, dim).copy(),
        domains=domains.copy(),
        labels=labels,
    )


def load_dataset_csv(path: str | Path) -> Dataset:
    """Import a dataset from CSV (feature columns, optional trailing
    ``label`` and ``domain`` columns)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty CSV")
    header = [h.strip() for h in rows[0]]
    tail = []
    while header and header[-1].lower() in ("label", "domain"):
        tail.insert(0, header.pop().lower())
    if len(set(tail)) != len(tail):
        raise FormatError(f"{path}: duplicate trailing column")
    n_feat = len(header)
    if n_feat < 1:
        raise FormatError(f"{path}: no feature columns")

    feats, doms, labs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n_feat + len(tail):
            raise DimensionError(
                f"{path}:{lineno}: expected {n_feat + len(tail)} columns, got {len(row)}"
            )
        try:
            feats.append([float(v) for v in row[:n_feat]])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: non-numeric feature: {exc}") from exc
        extra = dict(zip(tail, row[n_feat:]))
        lab = extra.get("label", "").strip()
        labs.append(int(lab) if lab else -1)
        dom = extra.get("domain", "ID").strip().upper()
        if dom in ("ID", "0"):
            doms.append(Domain.ID)
        elif dom in ("OOD", "1"):
            doms.append(Domain.OOD)
        else:
            raise FormatError(f"{path}:{lineno}: invalid domain {dom!r}")
    if not feats:
        raise FormatError(f"{path}: CSV has a header but no rows")
    return Dataset(
        features=np.asarray(feats, dtype=np.float32),
        domains=np.asarray(doms, dtype=np.uint8),
        labels=np.asarray(labs, dtype=np.int64),
    )


def balanced_spec(spec: LongTailSpec, per_class: int, seed: int) -> LongTailSpec:
    """Same class geometry as ``spec`` but balanced counts, for test splits."""
    return replace(
        spec,
        max_per_class=per_class,
        imbalance_ratio=1.0,
        seed=seed,
    )
