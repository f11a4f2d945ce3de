"""Datasets: the synthetic checkerboard, CSV ingestion and z-scoring."""
from __future__ import annotations

import csv
import hashlib
import warnings
from dataclasses import dataclass, replace
from functools import cached_property

import numpy as np

from .errors import ContractError


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable labelled design matrix.

    ``standardization`` holds per-column ``(mean, std)`` of the original
    features, so that ``original = features * std + mean``.
    """

    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...] | None = None
    standardization: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        x = np.array(self.features, dtype=float)
        if x.ndim != 2:
            raise ContractError(f"features must be 2-D, got shape {x.shape}")
        y = np.asarray(self.labels)
        if y.ndim != 1 or len(y) != len(x):
            raise ContractError("labels must be a vector with one entry per row")
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ContractError("labels must be integers")
        y = y.astype(np.int64)
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0][0])
            raise ContractError(f"non-finite feature in row {bad}")
        if y.size and y.min() < 0:
            raise ContractError("labels must be non-negative")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != x.shape[1]:
                raise ContractError("feature_names length does not match column count")
            object.__setattr__(self, "feature_names", names)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @cached_property
    def features_t(self) -> np.ndarray:
        # (d, N) contiguous copy; row-wise kernels are much faster on it
        return np.ascontiguousarray(self.features.T)

    def one_hot(self, n_classes: int) -> np.ndarray:
        cache = self.__dict__.setdefault("_one_hot", {})
        if n_classes not in cache:
            if len(self) and self.labels.max() >= n_classes:
                raise ContractError(f"label {int(self.labels.max())} outside [0, {n_classes})")
            y = np.zeros((n_classes, len(self)))
            y[self.labels, np.arange(len(self))] = 1.0
            y.setflags(write=False)
            cache[n_classes] = y
        return cache[n_classes]

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.features.shape).encode())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def split(self, fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Random (first, second) split; ``fraction`` of rows go to the first part."""
        if not 0.0 < fraction < 1.0:
            raise ContractError("fraction must lie in (0, 1)")
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(np.sort(order[:cut])), self.subset(np.sort(order[cut:]))

    def subset(self, rows) -> "Dataset":
        return Dataset(self.features[rows], self.labels[rows], self.feature_names,
                       self.standardization)


def checkerboard_labels(points: np.ndarray, tiles_per_axis: int) -> np.ndarray:
    cells = np.floor(np.asarray(points, dtype=float) * tiles_per_axis).astype(np.int64)
    # points exactly on the upper edge belong to the last tile
    cells = np.minimum(cells, tiles_per_axis - 1)
    return (cells[:, 0] + cells[:, 1]) % 2


def gen_checkerboard(n_samples: int, tiles_per_axis: int = 4, label_noise: float = 0.0,
                     seed: int = 0) -> Dataset:
    """Uniform points on the unit square labelled by tile parity.

    Each label is flipped independently with probability ``label_noise``.
    """
    if tiles_per_axis < 1:
        raise ContractError("tiles_per_axis must be at least 1")
    if n_samples < 1:
        raise ContractError("n_samples must be positive")
    if not 0.0 <= label_noise < 1.0:
        raise ContractError("label_noise must lie in [0, 1)")
    if n_samples < 2 * tiles_per_axis**2:
        warnings.warn(f"{n_samples} samples for {tiles_per_axis**2} tiles leaves tiles nearly empty",
                      stacklevel=2)
    rng = np.random.default_rng(seed)
    points = rng.uniform(0.0, 1.0, size=(n_samples, 2))
    labels = checkerboard_labels(points, tiles_per_axis)
    if label_noise > 0:
        flip = rng.uniform(size=n_samples) < label_noise
        labels = np.where(flip, 1 - labels, labels)
    return Dataset(points, labels, ("x", "y"))


def _parse_float(text: str, row: int, col: int) -> float:
    try:
        value = float(text.strip())
    except ValueError:
        raise ContractError(f"non-numeric cell {text!r} at row {row}, column {col}") from None
    if not np.isfinite(value):
        raise ContractError(f"non-finite cell {text!r} at row {row}, column {col}")
    return value


def load_csv(path, label_column: str | int = -1, has_header: bool = True) -> Dataset:
    """Read a comma-separated file; every column except the label is a feature.

    ``label_column`` is a header name or a (possibly negative) column index.
    Reported row numbers are 1-based file lines.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    header = None
    if has_header:
        if not rows:
            raise ContractError(f"{path}: empty file")
        header, rows = [c.strip() for c in rows[0]], rows[1:]
    if not rows:
        raise ContractError(f"{path}: no data rows")
    width = len(header) if header is not None else len(rows[0])
    if isinstance(label_column, str):
        if header is None or label_column not in header:
            raise ContractError(f"{path}: label column {label_column!r} not found")
        label_idx = header.index(label_column)
    else:
        label_idx = label_column + width if label_column < 0 else label_column
        if not 0 <= label_idx < width:
            raise ContractError(f"{path}: label column index {label_column} out of range")
    feature_cols = [c for c in range(width) if c != label_idx]

    first_line = 2 if has_header else 1
    x = np.empty((len(rows), len(feature_cols)))
    y = np.empty(len(rows), dtype=np.int64)
    for i, row in enumerate(rows):
        line = first_line + i
        if len(row) != width:
            raise ContractError(f"{path}: row {line} has {len(row)} columns, expected {width}")
        for j, c in enumerate(feature_cols):
            x[i, j] = _parse_float(row[c], line, c + 1)
        label = _parse_float(row[label_idx], line, label_idx + 1)
        if label != int(label) or label < 0:
            raise ContractError(f"{path}: label {row[label_idx]!r} at row {line} is not a class index")
        y[i] = int(label)
    names = tuple(header[c] for c in feature_cols) if header is not None else None
    return Dataset(x, y, names)


def save_csv(dataset: Dataset, path, label_name: str = "label") -> None:
    names = dataset.feature_names or tuple(f"x{i + 1}" for i in range(dataset.n_features))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*names, label_name])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def standardize(dataset: Dataset) -> Dataset:
    """Per-column z-score with the population standard deviation.

    Constant columns become zero and record a standard deviation of 1.
    """
    if len(dataset) < 2:
        raise ContractError("standardize needs at least two rows")
    x = dataset.features
    mean = x.mean(axis=0)
    centred = x - mean
    std = np.sqrt((centred**2).mean(axis=0))
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(constant, 1.0, std)
    z = np.where(constant, 0.0, centred / std)

    if dataset.standardization is not None:
        old_mean, old_std = dataset.standardization
        mean, std = old_mean + old_std * mean, old_std * std
    return replace(dataset, features=z, standardization=(mean, std))

