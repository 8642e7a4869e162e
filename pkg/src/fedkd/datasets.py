"""Dataset construction: synthetic Gaussian class clouds with optional domain
shift, CSV ingestion, Dirichlet non-IID partitioning, and per-node class-count
profiles.

Labels are an (N, 1) int array of class indices for single-label tasks, or an
(N, C) array over {-1, 0, 1} (unknown / negative / positive) for multi-label
tasks. Datasets are immutable after construction.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, ValidationError
from .numkit import RandomStream

SINGLE_LABEL = "single_label"
MULTI_LABEL = "multi_label"

__all__ = [
    "SINGLE_LABEL",
    "MULTI_LABEL",
    "Dataset",
    "NodeProfile",
    "PartitionPlan",
    "GaussianTaskSpec",
    "CsvSchema",
    "gen_gaussian_task",
    "load_csv",
    "dirichlet_partition",
    "rarest_positive_label",
    "profile",
    "plan_to_json",
    "plan_from_json",
]


@dataclass
class Dataset:
    features: np.ndarray  # N x d float64
    labels: np.ndarray    # N x 1 ints (single) or N x C in {-1,0,1} (multi)
    task: str
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValidationError("features must be 2-D")
        n = self.features.shape[0]
        if self.task == SINGLE_LABEL:
            if self.labels.shape != (n, 1):
                raise ValidationError(f"single-label labels must be (N, 1), got {self.labels.shape}")
            if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValidationError("label out of range [0, C)")
        elif self.task == MULTI_LABEL:
            if self.labels.shape != (n, self.num_classes):
                raise ValidationError(f"multi-label labels must be (N, C), got {self.labels.shape}")
            if n and not np.isin(self.labels, (-1, 0, 1)).all():
                raise ValidationError("multi-label entries must be in {-1, 0, 1}")
        else:
            raise ValidationError(f"unknown task {self.task!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.task, self.num_classes)

    def concat(self, other: "Dataset") -> "Dataset":
        if other.task != self.task or other.num_classes != self.num_classes:
            raise ConfigurationError("cannot concatenate datasets with different tasks")
        return Dataset(
            np.concatenate([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            self.task,
            self.num_classes,
        )


@dataclass
class NodeProfile:
    """Per-class sample counts for one node's training data."""

    counts: np.ndarray  # length C, non-negative ints

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or (self.counts < 0).any():
            raise ValidationError("counts must be a 1-D non-negative int array")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class PartitionPlan:
    """Disjoint index lists into a parent dataset, one per node."""

    assignments: list[np.ndarray]
    alpha: float
    seed: int | None = None

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]

    @property
    def num_nodes(self) -> int:
        return len(self.assignments)

    def validate_for(self, ds: Dataset) -> None:
        flat = np.concatenate(self.assignments) if self.assignments else np.empty(0, dtype=np.int64)
        if flat.size != ds.n or (flat.size and (np.sort(flat) != np.arange(ds.n)).any()):
            raise ValidationError("assignments must cover the dataset exactly once")


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass
class GaussianTaskSpec:
    """Isotropic Gaussian clouds, one per class, optionally domain-shifted.

    Class c is drawn from Normal(class_means[c] + domain_shift, cov_scale^2 I).
    """

    num_classes: int
    dim: int
    per_class_count: int
    class_means: np.ndarray           # C x d
    cov_scale: float = 1.0
    domain_shift: np.ndarray | None = None  # length d; default zero

    def __post_init__(self):
        if self.num_classes < 2 or self.dim < 1:
            raise ConfigurationError("need num_classes >= 2 and dim >= 1")
        self.class_means = np.asarray(self.class_means, dtype=np.float64)
        if self.class_means.shape != (self.num_classes, self.dim):
            raise ConfigurationError(
                f"class_means shape {self.class_means.shape}, expected {(self.num_classes, self.dim)}"
            )
        if self.domain_shift is None:
            self.domain_shift = np.zeros(self.dim)
        self.domain_shift = np.asarray(self.domain_shift, dtype=np.float64)
        if self.domain_shift.shape != (self.dim,):
            raise ConfigurationError("domain_shift must be a length-d vector")


def gen_gaussian_task(spec: GaussianTaskSpec, rs: RandomStream) -> Dataset:
    """Sample per_class_count points per class; deterministic per stream."""
    blocks, labels = [], []
    for c in range(spec.num_classes):
        center = spec.class_means[c] + spec.domain_shift
        x = rs.gauss((spec.per_class_count, spec.dim)) * spec.cov_scale + center
        blocks.append(x)
        labels.append(np.full((spec.per_class_count, 1), c, dtype=np.int64))
    return Dataset(np.concatenate(blocks), np.concatenate(labels), SINGLE_LABEL, spec.num_classes)


# ---------------------------------------------------------------------------
# CSV ingestion


@dataclass
class CsvSchema:
    feature_cols: list[str]
    label_cols: list[str]
    task: str
    num_classes: int

    def __post_init__(self):
        if self.task not in (SINGLE_LABEL, MULTI_LABEL):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.task == SINGLE_LABEL and len(self.label_cols) != 1:
            raise ConfigurationError("single-label schema needs exactly one label column")
        if self.task == MULTI_LABEL and len(self.label_cols) != self.num_classes:
            raise ConfigurationError("multi-label schema needs one label column per class")


def load_csv(path: str | Path, schema: CsvSchema) -> Dataset:
    """Read a UTF-8, header-first CSV into a Dataset.

    Parse failures raise FormatError naming the 1-based data row; label values
    outside the schema's range raise ValidationError naming the row.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise FormatError(f"{path}: empty file, expected a header row")
        missing = [c for c in schema.feature_cols + schema.label_cols if c not in reader.fieldnames]
        if missing:
            raise FormatError(f"{path}: missing columns {missing}")
        feats, labs = [], []
        for rownum, row in enumerate(reader, start=1):
            try:
                feats.append([float(row[c]) for c in schema.feature_cols])
                labs.append([float(row[c]) for c in schema.label_cols])
            except (TypeError, ValueError) as exc:
                raise FormatError(f"{path}: row {rownum}: {exc}") from exc

    features = np.asarray(feats, dtype=np.float64).reshape(len(feats), len(schema.feature_cols))
    raw = np.asarray(labs, dtype=np.float64).reshape(len(labs), len(schema.label_cols))
    if raw.size and not np.array_equal(raw, np.round(raw)):
        bad = int(np.argwhere(raw != np.round(raw))[0][0]) + 1
        raise ValidationError(f"{path}: row {bad}: non-integer label value")
    labels = raw.astype(np.int64)

    if schema.task == SINGLE_LABEL and labels.size:
        bad_rows = np.where((labels[:, 0] < 0) | (labels[:, 0] >= schema.num_classes))[0]
        if bad_rows.size:
            r = int(bad_rows[0]) + 1
            raise ValidationError(
                f"{path}: row {r}: label {labels[bad_rows[0], 0]} outside [0, {schema.num_classes})"
            )
    if schema.task == MULTI_LABEL and labels.size:
        bad_rows = np.where(~np.isin(labels, (-1, 0, 1)).all(axis=1))[0]
        if bad_rows.size:
            raise ValidationError(f"{path}: row {int(bad_rows[0]) + 1}: multi-label entry not in {{-1,0,1}}")
    return Dataset(features, labels, schema.task, schema.num_classes)


# ---------------------------------------------------------------------------
# partitioning


def rarest_positive_label(sample_labels: np.ndarray, global_positive_counts: np.ndarray) -> int:
    """Effective class of a multi-label sample for partitioning purposes.

    Among classes marked positive, picks the one with the fewest positives
    globally (ties to the lowest index). A sample with no positives maps to
    the pseudo-class C, which is partitioned as its own bucket.
    """
    v = np.asarray(sample_labels)
    counts = np.asarray(global_positive_counts)
    positives = np.flatnonzero(v == 1)
    if positives.size == 0:
        return int(counts.shape[0])  # all-negative pseudo-class
    return int(positives[np.argmin(counts[positives])])


def _effective_labels(ds: Dataset) -> np.ndarray:
    if ds.task == SINGLE_LABEL:
        return ds.labels[:, 0]
    global_pos = (ds.labels == 1).sum(axis=0)
    return np.array([rarest_positive_label(row, global_pos) for row in ds.labels], dtype=np.int64)


def dirichlet_partition(ds: Dataset, num_nodes: int, alpha: float, rs: RandomStream) -> PartitionPlan:
    """Class-wise Dirichlet split: for each class, proportions over nodes are
    drawn from Dirichlet(alpha * 1_K) and the class's (shuffled) indices are
    cut at the cumulative boundaries. Smaller alpha -> more skew. Multi-label
    datasets are bucketed by their rarest positive class first.
    """
    if num_nodes < 1:
        raise ConfigurationError("need at least one node")
    if alpha <= 0:
        raise ConfigurationError("alpha must be > 0")
    if num_nodes > ds.n:
        raise ConfigurationError(f"cannot split {ds.n} samples across {num_nodes} nodes")

    eff = _effective_labels(ds)
    assignments: list[list[int]] = [[] for _ in range(num_nodes)]
    for c in np.unique(eff):
        idx = np.flatnonzero(eff == c)
        idx = idx[rs.permutation(idx.size)]
        p = rs.dirichlet(np.full(num_nodes, float(alpha)))
        edges = np.floor(np.cumsum(p) * idx.size).astype(np.int64)
        edges[-1] = idx.size  # guard against rounding shortfall
        start = 0
        for k in range(num_nodes):
            assignments[k].extend(idx[start:edges[k]].tolist())
            start = edges[k]
    parts = [np.sort(np.asarray(a, dtype=np.int64)) for a in assignments]
    plan = PartitionPlan(parts, alpha=float(alpha), seed=rs.seed)
    plan.validate_for(ds)
    return plan


def profile(ds: Dataset, plan: PartitionPlan) -> list[NodeProfile]:
    """Per-node class counts: label occurrences (single) or positives (multi)."""
    plan.validate_for(ds)
    profiles = []
    for idx in plan.assignments:
        if ds.task == SINGLE_LABEL:
            counts = np.bincount(ds.labels[idx, 0], minlength=ds.num_classes)
        else:
            counts = (ds.labels[idx] == 1).sum(axis=0)
        profiles.append(NodeProfile(counts))
    return profiles


def profile_of(ds: Dataset) -> NodeProfile:
    """Class counts of a whole dataset (a node's actual training set)."""
    if ds.task == SINGLE_LABEL:
        counts = np.bincount(ds.labels[:, 0], minlength=ds.num_classes) if ds.n else np.zeros(ds.num_classes, dtype=np.int64)
    else:
        counts = (ds.labels == 1).sum(axis=0)
    return NodeProfile(counts)


# ---------------------------------------------------------------------------
# plan serialization


def plan_to_json(plan: PartitionPlan) -> str:
    doc = {
        "alpha": plan.alpha,
        "seed": plan.seed,
        "assignments": [a.tolist() for a in plan.assignments],
    }
    return json.dumps(doc, sort_keys=True)


def plan_from_json(text: str) -> PartitionPlan:
    try:
        doc = json.loads(text)
        return PartitionPlan(
            [np.asarray(a, dtype=np.int64) for a in doc["assignments"]],
            alpha=float(doc["alpha"]),
            seed=doc.get("seed"),
        )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad partition plan document: {exc}") from exc
