"""Small classification datasets: synthetic generators and delimited-text I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if len(self.labels) and self.labels.min() < 0:
            raise ValueError("labels must be non-negative class indices")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def split(self, test_fraction: float = 0.3, seed: int = 0):
        """Stratification-free shuffled train/test split."""
        rng = np.random.default_rng(seed)
        order = rng.permutation(len(self))
        cut = int(round(len(self) * (1 - test_fraction)))
        tr, te = order[:cut], order[cut:]
        return (Dataset(self.features[tr], self.labels[tr], f"{self.name}-train"),
                Dataset(self.features[te], self.labels[te], f"{self.name}-test"))


def make_synthetic(kind: str = "blobs", n_per_class: int = 200, classes: int = 4,
                   seed: int = 0, n_features: int = 2, spread: float = 1.0,
                   radius: float = 4.0) -> Dataset:
    """Deterministic toy tasks.

    ``blobs``: Gaussian clusters whose centers sit evenly on a circle of
    ``radius`` (padded with zeros in extra dimensions).  ``rings``:
    concentric annuli, one per class, which no linear model separates.
    """
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    if kind == "blobs":
        for c in range(classes):
            center = np.zeros(n_features)
            angle = 2 * np.pi * c / classes
            center[0], center[1 % n_features] = radius * np.cos(angle), radius * np.sin(angle)
            xs.append(center + spread * rng.normal(size=(n_per_class, n_features)))
            ys.append(np.full(n_per_class, c))
    elif kind == "rings":
        if n_features != 2:
            raise ValueError("rings are two-dimensional")
        for c in range(classes):
            r = (c + 1) + 0.3 * spread * rng.uniform(-1, 1, size=n_per_class)
            theta = rng.uniform(0, 2 * np.pi, size=n_per_class)
            xs.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
            ys.append(np.full(n_per_class, c))
    else:
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    X, y = np.vstack(xs), np.concatenate(ys)
    order = rng.permutation(len(y))
    return Dataset(X[order], y[order], kind)


def load_csv(path) -> Dataset:
    """Read ``f1,f2,...,label`` rows after a one-line header."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        rows = [r for r in reader if r]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise ValueError(f"{path}: non-numeric field ({exc})") from None
    labels = data[:, -1]
    if np.any(labels != np.round(labels)):
        raise ValueError(f"{path}: labels must be integers")
    return Dataset(data[:, :-1], labels.astype(np.int64), path.stem)


def save_csv(dataset: Dataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i + 1}" for i in range(dataset.n_features)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])
