"""Tabular dataset ingestion, train/test split, normalization and input quantization."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray            # float64 [n_samples, n_features]
    labels: np.ndarray              # int64 [n_samples], contiguous from 0
    name: str = "dataset"
    feature_mins: np.ndarray | None = None
    feature_maxs: np.ndarray | None = None
    class_names: tuple[str, ...] = ()
    row_ids: np.ndarray | None = None  # original row index in the source file

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DatasetError("features must be 2-D and labels 1-D")
        if len(self.features) != len(self.labels):
            raise DatasetError("features and labels differ in length")

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    @property
    def n_classes(self) -> int:
        if self.class_names:
            return len(self.class_names)
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx: np.ndarray) -> "Dataset":
        rows = self.row_ids if self.row_ids is not None else np.arange(self.n_samples)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            name=self.name,
            feature_mins=self.feature_mins,
            feature_maxs=self.feature_maxs,
            class_names=self.class_names,
            row_ids=rows[idx],
        )


@dataclass(frozen=True)
class QuantizedDataset:
    features: np.ndarray   # int64 [n_samples, n_features], each in [0, 2**input_bits - 1]
    labels: np.ndarray
    input_bits: int = 4
    name: str = "dataset"
    n_classes: int = 0

    def __post_init__(self):
        hi = (1 << self.input_bits) - 1
        if self.features.size and (self.features.min() < 0 or self.features.max() > hi):
            raise DatasetError(f"quantized features must lie in [0, {hi}]")
        if not self.n_classes:
            object.__setattr__(self, "n_classes", int(self.labels.max()) + 1 if len(self.labels) else 0)

    @property
    def n_samples(self) -> int:
        return int(self.features.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def dequantize(self) -> Dataset:
        """Real-valued view x_q / (2**B - 1), used to train the float baseline."""
        scale = (1 << self.input_bits) - 1
        return Dataset(self.features / scale, self.labels, name=self.name)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "input_bits": self.input_bits,
            "n_classes": self.n_classes,
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "QuantizedDataset":
        feats = np.asarray(doc["features"], dtype=np.int64)
        labels = np.asarray(doc["labels"], dtype=np.int64)
        return cls(feats.reshape(len(labels), -1), labels, int(doc["input_bits"]),
                   doc.get("name", "dataset"), int(doc.get("n_classes", 0)))


def _parse_float(cell: str, row: int, col: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise DatasetError(f"non-numeric feature cell {cell!r} at row {row}, column {col}") from None
    if not np.isfinite(value):
        raise DatasetError(f"non-finite feature cell {cell!r} at row {row}, column {col}")
    return value


def load_csv(path: str | Path, label_column: int = -1, *, header: bool | None = None,
             delimiter: str = ",", name: str | None = None) -> Dataset:
    """Read a numeric CSV with one categorical label column.

    Labels are remapped to 0..n_classes-1 following the sorted order of the
    original values (numerically when every label parses as a number).
    ``header=None`` sniffs: the first row is a header if any of its feature
    cells is non-numeric.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"empty dataset: {path}")

    n_cols = len(rows[0])
    lab = label_column % n_cols
    feat_cols = [c for c in range(n_cols) if c != lab]
    if header is None:
        header = False
        for c in feat_cols:
            try:
                float(rows[0][c])
            except ValueError:
                header = True
                break
    body = rows[1:] if header else rows
    first_line = 2 if header else 1
    if not body:
        raise DatasetError(f"empty dataset: {path}")

    feats = np.empty((len(body), len(feat_cols)), dtype=np.float64)
    raw_labels = []
    for r, row in enumerate(body):
        if len(row) != n_cols:
            raise DatasetError(f"row {r + first_line} has {len(row)} cells, expected {n_cols}")
        for k, c in enumerate(feat_cols):
            feats[r, k] = _parse_float(row[c].strip(), r + first_line, c)
        raw_labels.append(row[lab].strip())

    try:
        ordered = sorted(set(raw_labels), key=float)
    except ValueError:
        ordered = sorted(set(raw_labels))
    index = {v: i for i, v in enumerate(ordered)}
    labels = np.array([index[v] for v in raw_labels], dtype=np.int64)
    return Dataset(feats, labels, name=name or path.stem, class_names=tuple(ordered),
                   row_ids=np.arange(len(body)))


def split_train_test(d: Dataset, train_fraction: float = 0.7, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError(f"train_fraction must be in (0, 1), got {train_fraction}")
    perm = np.random.default_rng(seed).permutation(d.n_samples)
    n_train = int(round(train_fraction * d.n_samples))
    n_train = min(max(n_train, 1), d.n_samples - 1)
    return d.subset(np.sort(perm[:n_train])), d.subset(np.sort(perm[n_train:]))


def fit_normalization(train: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return train.features.min(axis=0), train.features.max(axis=0)


def normalize(d: Dataset, mins: np.ndarray, maxs: np.ndarray) -> Dataset:
    """Min-max scale with the given statistics; out-of-range values saturate at 0 or 1."""
    span = np.where(maxs > mins, maxs - mins, 1.0)
    scaled = np.clip((d.features - mins) / span, 0.0, 1.0)
    return Dataset(scaled, d.labels, name=d.name, feature_mins=np.asarray(mins).copy(),
                   feature_maxs=np.asarray(maxs).copy(), class_names=d.class_names,
                   row_ids=d.row_ids)


def normalize_split(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    mins, maxs = fit_normalization(train)
    return normalize(train, mins, maxs), normalize(test, mins, maxs)


def quantize_inputs(d: Dataset, bits: int = 4) -> QuantizedDataset:
    if bits < 1:
        raise DatasetError("bits must be >= 1")
    if d.features.size and (d.features.min() < 0.0 or d.features.max() > 1.0):
        raise DatasetError("quantize_inputs expects features normalized to [0, 1]")
    hi = (1 << bits) - 1
    q = np.floor(d.features * hi + 0.5).astype(np.int64)
    return QuantizedDataset(np.clip(q, 0, hi), d.labels.copy(), bits, d.name,
                            d.n_classes)


def save_quantized(q: QuantizedDataset, path: str | Path) -> None:
    Path(path).write_text(json.dumps(q.to_json()))


def load_quantized(path: str | Path) -> QuantizedDataset:
    return QuantizedDataset.from_json(json.loads(Path(path).read_text()))


@dataclass
class HeldOut:
    """Test partition that refuses reads until explicitly opened.

    Optimization stages only ever see the train partition; the final
    assessment calls :meth:`open` exactly once.
    """
    _data: QuantizedDataset
    opened: bool = field(default=False, init=False)
    reads: int = field(default=0, init=False)

    @property
    def n_samples(self) -> int:
        return self._data.n_samples

    def open(self) -> QuantizedDataset:
        if self.opened:
            raise RuntimeError("held-out test set was already opened")
        self.opened = True
        self.reads += 1
        return self._data

    def __getattr__(self, item):
        if item in ("features", "labels"):
            raise PermissionError("test data is sealed until the final assessment")
        raise AttributeError(item)
