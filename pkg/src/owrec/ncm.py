"""Nearest class mean classification in the learned metric space.

An ``NcmModel`` bundles a metric with one mean per registered class and a
precomputed cache of projected means.  Serialized models append to the
metric layout: ``uint32 K``, ``K`` ``uint32`` class ids (strictly
increasing), then ``K*d`` float64 mean entries in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .dataio import LabeledDataset
from .errors import OwrError
from .metric import (
    MetricModel,
    _expect_eof,
    _mean_table,
    _open_model,
    _read_exact,
    _read_struct,
)

# Candidate acceptance thresholds for the softmax-gated open-set baseline.
DEFAULT_THETA_GRID: tuple[float, ...] = tuple(i / 100 for i in range(10, 95, 5)) + (
    0.99,
)

_CACHE_TOL = 1e-12


def class_means(ds: LabeledDataset) -> list[tuple[int, np.ndarray]]:
    """Arithmetic mean of each class, as (id, vector) pairs in ascending id order."""
    return [
        (int(c), ds.features[ds.labels == c].mean(axis=0)) for c in ds.class_ids()
    ]


@dataclass(frozen=True, eq=False)
class NcmModel:
    """Metric plus registered class means, with cached projections."""

    metric: MetricModel
    ids: tuple[int, ...]
    means: np.ndarray
    projected_means: np.ndarray

    def __post_init__(self) -> None:
        ids = tuple(int(c) for c in self.ids)
        if len(ids) < 1:
            raise OwrError("a classifier needs at least one class")
        if any(c <= 0 for c in ids):
            raise OwrError("class ids must be positive")
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise OwrError("class ids must be strictly increasing")
        means = np.array(self.means, dtype=np.float64, copy=True)
        proj = np.array(self.projected_means, dtype=np.float64, copy=True)
        if means.shape != (len(ids), self.metric.d):
            raise OwrError(
                f"means shape {means.shape} does not match "
                f"{len(ids)} classes in {self.metric.d} dimensions"
            )
        if not np.all(np.isfinite(means)):
            raise OwrError("class means must be finite")
        if proj.shape != (len(ids), self.metric.m):
            raise OwrError(f"projected mean cache has wrong shape {proj.shape}")
        drift = np.max(np.abs(proj - means @ self.metric.w.T))
        if drift > _CACHE_TOL:
            raise OwrError(f"projected mean cache is stale (drift {drift:.3g})")
        means.setflags(write=False)
        proj.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "projected_means", proj)

    @property
    def class_count(self) -> int:
        return len(self.ids)

    @classmethod
    def build(cls, metric: MetricModel, means) -> "NcmModel":
        """Construct from (id, vector) pairs, computing the projection cache."""
        ids, mat = _mean_table(means)
        order = np.argsort(ids)
        ids, mat = ids[order], mat[order]
        if mat.shape[1] != metric.d:
            raise OwrError(
                f"class means have {mat.shape[1]} coordinates, metric expects {metric.d}"
            )
        return cls(metric, tuple(int(c) for c in ids), mat, mat @ metric.w.T)

    @classmethod
    def from_dataset(cls, metric: MetricModel, ds: LabeledDataset) -> "NcmModel":
        return cls.build(metric, class_means(ds))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self._write(fh)

    @classmethod
    def load(cls, path) -> "NcmModel":
        with _open_model(path) as fh:
            model = cls._read(fh)
            _expect_eof(fh, path)
        return model

    def _write(self, fh) -> None:
        self.metric._write(fh)
        fh.write(struct.pack("<I", self.class_count))
        fh.write(np.array(self.ids, dtype="<u4").tobytes())
        fh.write(self.means.astype("<f8").tobytes())

    @classmethod
    def _read(cls, fh) -> "NcmModel":
        metric = MetricModel._read(fh)
        (k,) = _read_struct(fh, "<I", "class count")
        if k < 1:
            raise OwrError("model declares zero classes")
        ids = np.frombuffer(_read_exact(fh, 4 * k, "class ids"), dtype="<u4")
        means = np.frombuffer(
            _read_exact(fh, 8 * k * metric.d, "class means"), dtype="<f8"
        ).reshape(k, metric.d)
        return cls.build(metric, list(zip(ids, means)))


def _check_point(model: NcmModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != model.metric.d:
        raise OwrError(
            f"expected a point with {model.metric.d} coordinates, got {x.shape[0]}"
        )
    if not np.all(np.isfinite(x)):
        raise OwrError("query point must be finite")
    return x


def _sq_dists(model: NcmModel, x) -> np.ndarray:
    """Squared projected distances from ``x`` to every class mean."""
    diff = model.projected_means - model.metric.project(_check_point(model, x))
    return np.einsum("km,km->k", diff, diff)


def dist_w(model: NcmModel, x, class_index: int) -> float:
    """Squared projected distance to the mean at position ``class_index``."""
    if not 0 <= class_index < model.class_count:
        raise OwrError(
            f"class index {class_index} out of range for {model.class_count} classes"
        )
    diff = model.metric.project(_check_point(model, x)) - model.projected_means[
        class_index
    ]
    return float(diff @ diff)


def softmax_probs(model: NcmModel, x) -> np.ndarray:
    """Posterior over registered classes: softmax of -0.5 * squared distances.

    Stabilized by subtracting the smallest squared distance before
    exponentiation, so points far from every mean still yield finite,
    normalized probabilities.
    """
    sq = _sq_dists(model, x)
    ez = np.exp(-0.5 * (sq - sq.min()))
    return ez / ez.sum()


def predict_closed(model: NcmModel, x) -> int:
    """Closed-set prediction: the id of the nearest projected mean."""
    return model.ids[int(np.argmin(_sq_dists(model, x)))]


def predict_softmax_threshold(model: NcmModel, x, theta: float) -> int:
    """Open-set baseline: nearest-mean id if its posterior reaches ``theta``, else 0."""
    if not 0.0 <= theta <= 1.0:
        raise OwrError(f"threshold must lie in [0, 1], got {theta}")
    probs = softmax_probs(model, x)
    if probs.max() >= theta:
        return predict_closed(model, x)
    return 0
