"""Synthetic and CSV-backed classification datasets."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


class DatasetKind(str, enum.Enum):
    BLOBS = "blobs"
    RINGS = "rings"
    XOR = "xor"
    CSV = "csv"


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind = DatasetKind.RINGS
    n_samples: int = 2000
    n_classes: int = 2
    input_dim: int = 2
    noise: float = 0.05
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", DatasetKind(self.kind))
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split must be three positive fractions summing to 1, got {self.split}")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.kind is DatasetKind.CSV:
            if not self.path:
                raise ValueError("csv datasets need a path")
        elif self.n_samples < self.n_classes or self.n_classes < 2 or self.input_dim < 1:
            raise ValueError("need n_classes >= 2, n_samples >= n_classes and input_dim >= 1")
        if self.kind in (DatasetKind.RINGS, DatasetKind.XOR) and self.input_dim < 2:
            raise ValueError(f"{self.kind.value} needs input_dim >= 2")
        if self.kind is DatasetKind.XOR and self.n_classes != 2:
            raise ValueError("xor has exactly 2 classes")


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.X[idx], self.y[idx])


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _pad(X: np.ndarray, dim: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    if X.shape[1] >= dim:
        return X
    extra = rng.standard_normal((len(X), dim - X.shape[1])) * noise
    return np.hstack([X, extra])


def generate_dataset(spec: DatasetSpec) -> Dataset:
    """Deterministic labeled samples for ``spec``.

    Rings are concentric annuli of radius ``1, 2, ...`` (one per class) with
    radial Gaussian noise; blobs are Gaussian clusters around seeded centers;
    xor labels the sign of ``x0 * x1``.
    """
    if spec.kind is DatasetKind.CSV:
        return load_csv(spec.path)
    rng = np.random.default_rng(spec.seed)
    n, c = spec.n_samples, spec.n_classes
    y = _balanced_labels(n, c, rng)
    if spec.kind is DatasetKind.RINGS:
        angle = rng.uniform(0.0, 2.0 * math.pi, n)
        radius = (y + 1.0) + spec.noise * rng.standard_normal(n)
        X = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        X = _pad(X, spec.input_dim, spec.noise, rng)
    elif spec.kind is DatasetKind.BLOBS:
        centers = rng.uniform(-4.0, 4.0, size=(c, spec.input_dim))
        X = centers[y] + spec.noise * rng.standard_normal((n, spec.input_dim))
    else:
        X = rng.uniform(-1.0, 1.0, size=(n, 2))
        y = (X[:, 0] * X[:, 1] < 0).astype(np.int64)
        X = X + spec.noise * rng.standard_normal(X.shape)
        X = _pad(X, spec.input_dim, spec.noise, rng)
    return Dataset(X.astype(np.float64), y.astype(np.int64))


def split_dataset(data: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Splits:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_train = int(round(fractions[0] * len(data)))
    n_val = int(round(fractions[1] * len(data)))
    return Splits(data.subset(order[:n_train]),
                  data.subset(order[n_train:n_train + n_val]),
                  data.subset(order[n_train + n_val:]))


def make_splits(spec: DatasetSpec) -> Splits:
    return split_dataset(generate_dataset(spec), spec.split, spec.seed)


def load_csv(path, label_column: str = "label") -> Dataset:
    """Read a headered UTF-8 CSV; every column but ``label`` is a feature."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if label_column not in header:
            raise ValueError(f"{path}: missing '{label_column}' column")
        li = header.index(label_column)
        rows, labels = [], []
        for r, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            feats = []
            for ci, cell in enumerate(row):
                try:
                    val = float(cell)
                except ValueError:
                    raise ValueError(f"{path}: row {r}, column '{header[ci]}': not a number: {cell!r}") from None
                if ci == li:
                    if val != int(val) or val < 0:
                        raise ValueError(f"{path}: row {r}, column '{header[ci]}': label must be a nonnegative integer")
                    labels.append(int(val))
                else:
                    feats.append(val)
            rows.append(feats)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return Dataset(np.array(rows, dtype=np.float64), np.array(labels, dtype=np.int64))


def load_cloud_csv(path) -> np.ndarray:
    """Read a headered numeric CSV as an ``(N, d)`` point cloud (no label column)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = []
        for r, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}: row {r} is not numeric") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)
