"""Synthetic classification datasets, CSV I/O, and IID equal-shard partitioning.

All generation is a pure function of its parameters and seed. Seeding goes
through numpy ``SeedSequence`` entropy lists, so streams are stable across
platforms and numpy versions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix


class DataError(ValueError):
    """Raised for malformed files, bad labels, or impossible partitions."""


@dataclass(frozen=True)
class Dataset:
    """Feature matrix (n, d), integer labels of length n, and the class count."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = as_matrix(self.features, "features")
        labels = np.asarray(self.labels)
        if labels.ndim != 1 or len(labels) != feats.shape[0]:
            raise DataError("labels must be a 1-D array with one entry per row")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DataError(
                f"labels must lie in [0, {self.num_classes}), "
                f"found {int(labels.min())}..{int(labels.max())}"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels.astype(np.intp))

    def __len__(self) -> int:
        return self.features.shape[0]


def _unit_directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    """Deterministic random unit vectors, one per row."""
    d = rng.standard_normal((count, dim))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    while np.any(norms == 0.0):  # pragma: no cover - measure-zero event
        d = rng.standard_normal((count, dim))
        norms = np.linalg.norm(d, axis=1, keepdims=True)
    return d / norms


def synth_gaussian_mixture(
    seed: int, classes: int, dim: int, n_per_class: int, separation: float
) -> Dataset:
    """Balanced Gaussian mixture with class means on a scaled sphere.

    Means sit at radius separation / sqrt(2) along seeded random directions,
    so pairwise mean distances scale linearly with ``separation``. Samples are
    unit-variance Gaussian around their mean. Features are standardized to
    zero mean and unit variance per dimension, and rows are shuffled
    deterministically with exact class balance preserved.
    """
    if classes < 2:
        raise DataError("need at least 2 classes")
    if dim < 1 or n_per_class < 1:
        raise DataError("dim and n_per_class must be positive")
    if separation <= 0.0:
        raise DataError("separation must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xDA7A]))
    means = (separation / np.sqrt(2.0)) * _unit_directions(rng, classes, dim)
    features = np.empty((classes * n_per_class, dim))
    labels = np.empty(classes * n_per_class, dtype=np.intp)
    for c in range(classes):
        block = slice(c * n_per_class, (c + 1) * n_per_class)
        features[block] = means[c] + rng.standard_normal((n_per_class, dim))
        labels[block] = c
    std = features.std(axis=0)
    std[std == 0.0] = 1.0
    features = (features - features.mean(axis=0)) / std
    perm = rng.permutation(len(labels))
    return Dataset(features=features[perm], labels=labels[perm], num_classes=classes)


def split_train_test(data: Dataset, test_per_class: int) -> tuple[Dataset, Dataset]:
    """Stratified deterministic split: first ``test_per_class`` rows of each
    class (in row order) become the test set."""
    if test_per_class < 1:
        raise DataError("test_per_class must be positive")
    taken = {c: 0 for c in range(data.num_classes)}
    test_mask = np.zeros(len(data), dtype=bool)
    for i, label in enumerate(data.labels):
        if taken[int(label)] < test_per_class:
            test_mask[i] = True
            taken[int(label)] += 1
    if any(v < test_per_class for v in taken.values()):
        raise DataError(
            f"not enough samples for {test_per_class} test rows in every class"
        )
    train = Dataset(
        features=data.features[~test_mask],
        labels=data.labels[~test_mask],
        num_classes=data.num_classes,
    )
    test = Dataset(
        features=data.features[test_mask],
        labels=data.labels[test_mask],
        num_classes=data.num_classes,
    )
    return train, test


def partition_iid(data: Dataset, num_clients: int, seed: int) -> list[Dataset]:
    """Deterministic shuffle, then contiguous equal shards.

    Requires the sample count to divide evenly; equal shard sizes keep uniform
    1/K aggregation exact. Per-class proportions inside a shard are whatever
    the shuffle produces (pure IID split, not stratified).
    """
    n = len(data)
    if num_clients < 1:
        raise DataError("need at least one client")
    if n % num_clients != 0:
        raise DataError(
            f"dataset size {n} is not divisible by {num_clients} clients"
        )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5A4D]))
    perm = rng.permutation(n)
    shard = n // num_clients
    out = []
    for k in range(num_clients):
        idx = perm[k * shard : (k + 1) * shard]
        out.append(
            Dataset(
                features=data.features[idx],
                labels=data.labels[idx],
                num_classes=data.num_classes,
            )
        )
    return out


def save_csv(data: Dataset, path) -> None:
    """Write rows of ``d`` feature columns plus a final integer label column.

    Comma separators, no header, repr-precision floats, LF line endings.
    """
    with open(path, "w", newline="\n") as fh:
        for row, label in zip(data.features, data.labels):
            fh.write(",".join(repr(float(v)) for v in row))
            fh.write(f",{int(label)}\n")


def load_csv(path, num_classes: int) -> Dataset:
    """Parse a dataset written in the save_csv layout, with validation."""
    features = []
    labels = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise DataError(f"{path}: line {lineno}: need features and a label")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataError(
                    f"{path}: line {lineno}: expected {width} columns, got {len(cells)}"
                )
            try:
                features.append([float(c) for c in cells[:-1]])
                label = int(cells[-1])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from exc
            if not 0 <= label < num_classes:
                raise DataError(
                    f"{path}: line {lineno}: label {label} outside [0, {num_classes})"
                )
            labels.append(label)
    if not labels:
        raise DataError(f"{path}: no data rows")
    return Dataset(
        features=np.asarray(features, dtype=np.float64),
        labels=np.asarray(labels, dtype=np.intp),
        num_classes=num_classes,
    )
