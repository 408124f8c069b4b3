"""Datasets, synthetic generation, CSV ingestion and non-IID partitioning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import streams
from .errors import EmptyDatasetError, ParameterError, ParseError, ValidationError


class Example(NamedTuple):
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    """Labeled feature vectors. ``features`` is (n, F), ``labels`` is (n,)."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValidationError(f"features must be 2-D, got shape {features.shape}")
        if labels.shape != (features.shape[0],):
            raise ValidationError("labels and features disagree on the number of examples")
        if not np.isfinite(features).all():
            raise ValidationError("features contain NaN or Inf")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        features.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.labels.shape[0]

    def __getitem__(self, idx) -> Example:
        return Example(self.features[idx], int(self.labels[idx]))

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def examples(self) -> list[Example]:
        return [self[i] for i in range(len(self))]

    def subset(self, indices) -> Dataset:
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[indices], self.labels[indices], self.num_classes)

    def to_bytes(self) -> bytes:
        return self.features.tobytes() + self.labels.tobytes()


@dataclass(frozen=True)
class PublicPool:
    """The shared unlabeled pool as the protocol sees it: features only."""

    features: np.ndarray

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        features.setflags(write=False)
        object.__setattr__(self, "features", features)

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class SealedLabels:
    """Labels of the public pool. Evaluation code only; never handed to training."""

    labels: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    dirichlet_alpha: float
    num_groups: int = 5
    pool_fraction: float = 0.10
    public_fraction: float = 0.20
    test_fraction: float = 0.0
    seed: int = 0

    def validate(self):
        if self.num_clients < 1:
            raise ParameterError("num_clients must be >= 1")
        if not self.dirichlet_alpha > 0:
            raise ParameterError("dirichlet_alpha must be positive")
        if self.num_groups < 1:
            raise ParameterError("num_groups must be >= 1")
        if self.num_clients < self.num_groups:
            raise ParameterError(
                f"num_clients ({self.num_clients}) must be >= num_groups ({self.num_groups})"
            )
        for name in ("pool_fraction", "public_fraction", "test_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ParameterError(f"{name} must be in [0, 1], got {value}")


@dataclass(frozen=True)
class Partition:
    client_datasets: list[Dataset]
    public_pool: PublicPool
    sealed: SealedLabels
    group_of_client: dict[int, int]
    group_classes: list[tuple[int, ...]]
    client_tests: list[Dataset]
    num_classes: int

    @property
    def num_clients(self) -> int:
        return len(self.client_datasets)

    def total_examples(self) -> int:
        return (
            sum(len(d) for d in self.client_datasets)
            + sum(len(d) for d in self.client_tests)
            + len(self.public_pool)
        )

    def with_sealed_labels(self, labels) -> Partition:
        """Copy with the evaluation-only pool labels replaced."""
        return Partition(
            self.client_datasets,
            self.public_pool,
            SealedLabels(np.asarray(labels, dtype=np.int64)),
            self.group_of_client,
            self.group_classes,
            self.client_tests,
            self.num_classes,
        )


def generate_synthetic(
    num_classes: int,
    feature_dim: int,
    samples_per_class: int,
    class_separation: float,
    seed: int,
) -> Dataset:
    """Isotropic unit-variance Gaussian blobs, one per class.

    Class means are ``class_separation`` times unit vectors (orthonormal when
    ``num_classes <= feature_dim``), so every pairwise mean distance is
    proportional to ``class_separation``.
    """
    if num_classes < 2:
        raise ParameterError("num_classes must be >= 2")
    if feature_dim < 1:
        raise ParameterError("feature_dim must be >= 1")
    if samples_per_class < 1:
        raise ParameterError("samples_per_class must be >= 1")
    rng = streams.stream(seed, streams.DATA)
    directions = rng.standard_normal((num_classes, feature_dim))
    if num_classes <= feature_dim:
        q, _ = np.linalg.qr(directions.T)
        directions = q.T[:num_classes]
    else:
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = class_separation * directions
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    features = means[labels] + rng.standard_normal((labels.size, feature_dim))
    return Dataset(features, labels, num_classes)


def load_csv(path, num_classes: int, header: bool = False) -> Dataset:
    """Read feature columns followed by one integer label column."""
    rows, labels = [], []
    width = None
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise ParseError("expected at least one feature column and a label", lineno)
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", lineno)
            try:
                feats = [float(cell) for cell in row[:-1]]
            except ValueError as exc:
                raise ParseError(f"bad feature value ({exc})", lineno) from None
            try:
                label = int(row[-1].strip())
            except ValueError:
                raise ParseError(f"label {row[-1]!r} is not an integer", lineno) from None
            if not all(math.isfinite(v) for v in feats):
                raise ValidationError(f"line {lineno}: non-finite feature value")
            if not 0 <= label < num_classes:
                raise ValidationError(
                    f"line {lineno}: label {label} outside [0, {num_classes})"
                )
            rows.append(feats)
            labels.append(label)
    if not rows:
        raise EmptyDatasetError(f"{path} contains no examples")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64), num_classes)


def split_classes(num_classes: int, num_groups: int) -> list[tuple[int, ...]]:
    """Contiguous blocks of ``num_classes // num_groups``; leftovers dealt round-robin."""
    if num_groups > num_classes:
        raise ParameterError(f"cannot split {num_classes} classes into {num_groups} groups")
    base = num_classes // num_groups
    groups = [list(range(g * base, (g + 1) * base)) for g in range(num_groups)]
    for r, c in enumerate(range(num_groups * base, num_classes)):
        groups[r % num_groups].append(c)
    return [tuple(g) for g in groups]


def _dirichlet(rng: np.random.Generator, alpha: float, k: int) -> np.ndarray:
    if k == 1:
        return np.ones(1)
    p = rng.dirichlet(np.full(k, alpha))
    if not np.isfinite(p).all() or p.sum() <= 0:
        # tiny alpha can underflow every gamma draw; the limit is a point mass
        p = np.zeros(k)
        p[rng.integers(k)] = 1.0
    return p


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def partition(dataset: Dataset, spec: PartitionSpec) -> Partition:
    """Hold out the public pool, then split the rest into non-IID clients.

    Order of operations: public pool drawn uniformly from all examples;
    classes split into groups; clients assigned to groups round-robin; each
    class's remaining examples split among its group's clients by a
    Dirichlet draw; a fraction of every client's examples pooled, shuffled
    and dealt back across all clients; finally an optional per-client test
    split.
    """
    spec.validate()
    n = len(dataset)
    if n == 0:
        raise EmptyDatasetError("cannot partition an empty dataset")
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    if (counts == 0).any():
        missing = np.flatnonzero(counts == 0).tolist()
        raise ParameterError(f"classes with zero samples: {missing}")

    rng = streams.stream(spec.seed, streams.DATA)
    group_classes = split_classes(dataset.num_classes, spec.num_groups)

    order = rng.permutation(n)
    n_public = _round_half_up(spec.public_fraction * n)
    public_idx = np.sort(order[:n_public])
    private_idx = np.sort(order[n_public:])

    group_of_client = {i: i % spec.num_groups for i in range(spec.num_clients)}
    members = [[i for i in range(spec.num_clients) if group_of_client[i] == g] for g in range(spec.num_groups)]

    shards: list[list[int]] = [[] for _ in range(spec.num_clients)]
    private_labels = dataset.labels[private_idx]
    for g, classes in enumerate(group_classes):
        owners = members[g]
        for c in classes:
            idx = private_idx[private_labels == c]
            idx = idx[rng.permutation(idx.size)]
            props = _dirichlet(rng, spec.dirichlet_alpha, len(owners))
            cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
            for owner, part in zip(owners, np.split(idx, cuts)):
                shards[owner].extend(part.tolist())

    if spec.pool_fraction > 0:
        pooled = []
        for i in range(spec.num_clients):
            local = np.asarray(shards[i], dtype=np.int64)
            k = _round_half_up(spec.pool_fraction * local.size)
            pick = rng.permutation(local.size)
            pooled.extend(local[pick[:k]].tolist())
            shards[i] = local[pick[k:]].tolist()
        pooled = np.asarray(pooled, dtype=np.int64)
        pooled = pooled[rng.permutation(pooled.size)]
        for j in range(spec.num_clients):
            shards[j].extend(pooled[j :: spec.num_clients].tolist())

    client_datasets, client_tests = [], []
    for i in range(spec.num_clients):
        local = np.sort(np.asarray(shards[i], dtype=np.int64))
        n_test = _round_half_up(spec.test_fraction * local.size) if spec.test_fraction > 0 else 0
        pick = rng.permutation(local.size)
        test = np.sort(local[pick[:n_test]])
        train = np.sort(local[pick[n_test:]])
        client_datasets.append(dataset.subset(train))
        client_tests.append(dataset.subset(test))

    return Partition(
        client_datasets=client_datasets,
        public_pool=PublicPool(dataset.features[public_idx]),
        sealed=SealedLabels(dataset.labels[public_idx].copy()),
        group_of_client=group_of_client,
        group_classes=group_classes,
        client_tests=client_tests,
        num_classes=dataset.num_classes,
    )
