"""Labeled feature datasets: file I/O, whitening, splits, and synthetic data.

Datasets are small enough to live in memory as a dense ``(n, d)`` float64
matrix plus one strictly positive integer label per row.  Label ``0`` is
reserved everywhere in this package for "unknown" predictions and therefore
never appears inside a dataset.

Two interchangeable on-disk formats are supported:

* CSV, one row per sample, no header: ``label,x_1,...,x_d``.
* A little-endian binary format: magic ``b"OWR1"``, ``uint32 n``,
  ``uint32 d``, then ``n`` ``uint32`` labels, then ``n*d`` ``float32``
  features in row-major order.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import OwrError

BINARY_MAGIC = b"OWR1"


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Immutable ``(n, d)`` feature matrix with one positive label per row."""

    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True).ravel()
        if feats.ndim != 2:
            raise OwrError(f"features must be a 2-d matrix, got shape {feats.shape}")
        if feats.shape[0] < 1 or feats.shape[1] < 1:
            raise OwrError(f"dataset must be non-empty, got shape {feats.shape}")
        if labels.shape[0] != feats.shape[0]:
            raise OwrError(
                f"{labels.shape[0]} labels for {feats.shape[0]} feature rows"
            )
        bad = np.where(~np.isfinite(feats).all(axis=1))[0]
        if bad.size:
            raise OwrError(f"non-finite feature value at row {int(bad[0])}")
        if np.any(labels == 0):
            raise OwrError(f"reserved label 0 at row {int(np.argmax(labels == 0))}")
        if np.any(labels < 0):
            raise OwrError(f"negative label at row {int(np.argmax(labels < 0))}")
        feats.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def class_ids(self) -> np.ndarray:
        """Distinct labels in ascending order."""
        return np.unique(self.labels)

    def subset(self, rows) -> "LabeledDataset":
        """New dataset restricted to the given row indices or boolean mask."""
        sub = LabeledDataset(self.features[rows], self.labels[rows])
        return sub


@dataclass(frozen=True, eq=False)
class WhitenStats:
    """Per-coordinate shift and scale, frozen at fit time."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.array(self.mean, dtype=np.float64, copy=True).ravel()
        std = np.array(self.std, dtype=np.float64, copy=True).ravel()
        if mean.shape != std.shape:
            raise OwrError("whitening mean and std must have the same length")
        if mean.size < 1:
            raise OwrError("whitening statistics must be non-empty")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise OwrError("whitening statistics must be finite")
        if np.any(std <= 0.0):
            raise OwrError(
                f"non-positive std at coordinate {int(np.argmax(std <= 0.0))}"
            )
        mean.setflags(write=False)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


@dataclass(frozen=True)
class SplitSpec:
    """Class-level partition into known and unknown, plus fold settings."""

    known_class_ids: tuple[int, ...]
    unknown_class_ids: tuple[int, ...]
    fold_count: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        known = tuple(int(c) for c in self.known_class_ids)
        unknown = tuple(int(c) for c in self.unknown_class_ids)
        if len(set(known)) != len(known) or len(set(unknown)) != len(unknown):
            raise OwrError("split class id lists must not contain duplicates")
        overlap = set(known) & set(unknown)
        if overlap:
            raise OwrError(f"classes {sorted(overlap)} listed as both known and unknown")
        if any(c <= 0 for c in known + unknown):
            raise OwrError("class ids must be positive")
        if self.fold_count < 2:
            raise OwrError(f"fold count must be at least 2, got {self.fold_count}")
        if self.seed < 0:
            raise OwrError("seed must be a non-negative integer")
        object.__setattr__(self, "known_class_ids", known)
        object.__setattr__(self, "unknown_class_ids", unknown)


def load_features(path, fmt: str = "auto") -> LabeledDataset:
    """Read a dataset from ``path``.

    ``fmt`` is ``"csv"``, ``"binary"``, or ``"auto"`` (pick by extension:
    ``.csv`` means CSV, anything else the binary format).
    """
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if fmt == "csv":
        return _load_csv(path)
    return _load_binary(path)


def save_features(ds: LabeledDataset, path, fmt: str = "auto") -> None:
    """Write ``ds`` to ``path`` in the chosen format (see ``load_features``).

    Binary features are stored as float32, so a binary round trip quantizes
    to float32 precision; CSV round trips are exact for float64 values.
    """
    path = Path(path)
    fmt = _resolve_format(path, fmt)
    if fmt == "csv":
        with open(path, "w", newline="\n") as fh:
            for label, row in zip(ds.labels, ds.features):
                fh.write(",".join([str(int(label))] + [repr(float(v)) for v in row]))
                fh.write("\n")
        return
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<II", ds.n, ds.d))
        fh.write(ds.labels.astype("<u4").tobytes())
        fh.write(ds.features.astype("<f4").tobytes())


def _resolve_format(path: Path, fmt: str) -> str:
    if fmt == "auto":
        return "csv" if path.suffix.lower() == ".csv" else "binary"
    if fmt not in ("csv", "binary"):
        raise OwrError(f"unknown dataset format {fmt!r}, expected csv or binary")
    return fmt


def _load_csv(path: Path) -> LabeledDataset:
    rows: list[list[float]] = []
    labels: list[int] = []
    d = None
    try:
        fh = open(path, newline="")
    except FileNotFoundError:
        raise OwrError(f"{path}: no such file")
    with fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            try:
                label = int(rec[0])
            except ValueError:
                raise OwrError(f"{path}: row {lineno}: malformed label {rec[0]!r}")
            if label == 0:
                raise OwrError(f"{path}: row {lineno}: reserved label 0")
            if label < 0:
                raise OwrError(f"{path}: row {lineno}: negative label {label}")
            try:
                vals = [float(v) for v in rec[1:]]
            except ValueError:
                raise OwrError(f"{path}: row {lineno}: malformed feature value")
            if d is None:
                d = len(vals)
                if d == 0:
                    raise OwrError(f"{path}: row {lineno}: row has no feature values")
            elif len(vals) != d:
                raise OwrError(
                    f"{path}: row {lineno}: expected {d} feature values, got {len(vals)}"
                )
            if not all(math.isfinite(v) for v in vals):
                raise OwrError(f"{path}: row {lineno}: non-finite feature value")
            labels.append(label)
            rows.append(vals)
    if not rows:
        raise OwrError(f"{path}: empty dataset")
    return LabeledDataset(np.array(rows, dtype=np.float64), np.array(labels))


def _load_binary(path: Path) -> LabeledDataset:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError:
        raise OwrError(f"{path}: no such file")
    if len(data) < 12:
        raise OwrError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != BINARY_MAGIC:
        raise OwrError(f"{path}: bad magic {data[:4]!r}, expected {BINARY_MAGIC!r}")
    n, d = struct.unpack_from("<II", data, 4)
    if n == 0 or d == 0:
        raise OwrError(f"{path}: empty dataset (n={n}, d={d})")
    expected = 12 + 4 * n + 4 * n * d
    if len(data) != expected:
        raise OwrError(f"{path}: expected {expected} bytes, found {len(data)}")
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=12).astype(np.int64)
    feats = (
        np.frombuffer(data, dtype="<f4", count=n * d, offset=12 + 4 * n)
        .astype(np.float64)
        .reshape(n, d)
    )
    return LabeledDataset(feats, labels)


def compute_whitening(ds: LabeledDataset) -> WhitenStats:
    """Fit per-coordinate mean and population std; zero stds are repaired to 1."""
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    return WhitenStats(mean, std)


def apply_whitening(stats: WhitenStats, ds: LabeledDataset) -> LabeledDataset:
    if stats.mean.shape[0] != ds.d:
        raise OwrError(
            f"whitening fitted on {stats.mean.shape[0]} coordinates, dataset has {ds.d}"
        )
    return LabeledDataset((ds.features - stats.mean) / stats.std, ds.labels)


def split_known_unknown(
    ds: LabeledDataset, spec: SplitSpec
) -> tuple[LabeledDataset, LabeledDataset]:
    """Partition rows by class membership into (known, unknown) datasets.

    Every id named in ``spec`` must be present in ``ds``; rows of classes
    named in neither list are dropped.  Row order is preserved on each side.
    """
    present = set(int(c) for c in ds.class_ids())
    missing = [c for c in spec.known_class_ids + spec.unknown_class_ids if c not in present]
    if missing:
        raise OwrError(f"class ids {missing} not present in dataset")
    if not spec.known_class_ids or not spec.unknown_class_ids:
        raise OwrError("both known and unknown class lists must be non-empty")
    known = ds.subset(np.isin(ds.labels, spec.known_class_ids))
    unknown = ds.subset(np.isin(ds.labels, spec.unknown_class_ids))
    return known, unknown


def make_folds(
    ds: LabeledDataset, fold_count: int, seed: int
) -> list[tuple[LabeledDataset, LabeledDataset]]:
    """Seeded stratified folds as ``fold_count`` (train, validation) pairs.

    Every class appears in every training side, each row lands in exactly one
    validation fold, and the same (ds, fold_count, seed) always produces the
    same assignment.
    """
    if fold_count < 2:
        raise OwrError(f"fold count must be at least 2, got {fold_count}")
    rng = np.random.default_rng(seed)
    assign = np.empty(ds.n, dtype=np.int64)
    for c in ds.class_ids():
        idx = np.where(ds.labels == c)[0]
        if idx.size < fold_count:
            raise OwrError(
                f"class {int(c)} has {idx.size} samples, needs at least "
                f"{fold_count} for {fold_count} folds"
            )
        idx = rng.permutation(idx)
        assign[idx] = np.arange(idx.size) % fold_count
    return [
        (ds.subset(assign != f), ds.subset(assign == f)) for f in range(fold_count)
    ]


def synthetic_class_centers(
    class_count: int, dim: int, separation: float, seed: int
) -> np.ndarray:
    """The ``(class_count, dim)`` center matrix used by ``gen_synthetic``."""
    rng = np.random.default_rng(seed)
    return _sphere_points(rng, class_count, dim) * separation


def gen_synthetic(
    class_count: int,
    dim: int,
    per_class: int,
    separation: float,
    spread: float,
    seed: int,
) -> LabeledDataset:
    """Sample a Gaussian-blob dataset with classes labeled ``1..class_count``.

    Class centers sit at ``separation`` times uniformly random unit
    directions (the same centers ``synthetic_class_centers`` reports for the
    same seed); each class contributes ``per_class`` isotropic Gaussian
    samples with standard deviation ``spread``.
    """
    if class_count < 1 or dim < 1 or per_class < 1:
        raise OwrError("class count, dimension, and per-class count must be positive")
    if separation <= 0.0 or spread <= 0.0:
        raise OwrError("separation and spread must be positive")
    rng = np.random.default_rng(seed)
    centers = _sphere_points(rng, class_count, dim) * separation
    blocks = []
    labels = np.repeat(np.arange(1, class_count + 1), per_class)
    for c in range(class_count):
        blocks.append(centers[c] + rng.normal(0.0, spread, size=(per_class, dim)))
    return LabeledDataset(np.vstack(blocks), labels)


def _sphere_points(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)
