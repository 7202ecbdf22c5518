"""Low-rank metric learning for nearest-mean classification.

The model is a single ``(m, d)`` projection ``w`` with ``m <= d``; the
learned (squared) distance between points is measured after projection,
``||w x - w y||^2``.  Training minimizes the multi-class logistic loss of a
softmax over negative halved squared projected distances to fixed class
means, by plain mini-batch SGD.

For a batch of ``n`` samples with posterior matrix ``P`` (``P[i, c]`` is the
probability of class ``c`` for sample ``i``) the gradient of the mean
negative log-likelihood has the closed form

    dL/dw = (1/n) * w * sum_i sum_c (onehot[i, c] - P[i, c])
                          * (x_i - mu_c)(x_i - mu_c)^T

which is evaluated here with matrix products only, so a training step costs
a handful of BLAS calls instead of a loop over classes.  ``finite_diff_check``
cross-checks this expression against central differences of the loss.

Model files use a little-endian binary layout: magic ``b"OWRW"``,
``uint32 m``, ``uint32 d``, then ``m*d`` float64 projection entries in
row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import LabeledDataset
from .errors import OwrError

METRIC_MAGIC = b"OWRW"


@dataclass(frozen=True, eq=False)
class MetricModel:
    """Immutable linear projection into the learned metric space."""

    w: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=np.float64, copy=True)
        if w.ndim != 2:
            raise OwrError(f"projection must be a 2-d matrix, got shape {w.shape}")
        m, d = w.shape
        if m < 1 or m > d:
            raise OwrError(f"projection shape {w.shape} violates 1 <= m <= d")
        if not np.all(np.isfinite(w)):
            raise OwrError("projection contains non-finite entries")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def d(self) -> int:
        return self.w.shape[1]

    @classmethod
    def identity(cls, d: int) -> "MetricModel":
        """Untrained metric: distances are plain squared Euclidean."""
        return cls(np.eye(d))

    def project(self, x) -> np.ndarray:
        """Map a ``(d,)`` vector or ``(n, d)`` matrix into the metric space."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise OwrError(f"expected {self.d} feature coordinates, got {x.shape[-1]}")
        return x @ self.w.T

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self._write(fh)

    @classmethod
    def load(cls, path) -> "MetricModel":
        with _open_model(path) as fh:
            model = cls._read(fh)
            _expect_eof(fh, path)
        return model

    def _write(self, fh) -> None:
        fh.write(METRIC_MAGIC)
        fh.write(struct.pack("<II", self.m, self.d))
        fh.write(self.w.astype("<f8").tobytes())

    @classmethod
    def _read(cls, fh) -> "MetricModel":
        magic = fh.read(4)
        if magic != METRIC_MAGIC:
            raise OwrError(f"bad metric magic {magic!r}, expected {METRIC_MAGIC!r}")
        m, d = _read_struct(fh, "<II", "metric header")
        if m < 1 or d < m:
            raise OwrError(f"metric header violates 1 <= m <= d (m={m}, d={d})")
        w = np.frombuffer(_read_exact(fh, 8 * m * d, "projection entries"), dtype="<f8")
        return cls(w.reshape(m, d))


@dataclass(frozen=True)
class SgdConfig:
    """Hyper-parameters for ``train_metric``."""

    learning_rate: float = 0.01
    iterations: int = 50_000
    batch_size: int = 64
    seed: int = 0
    init_scale: float = 0.01

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0:
            raise OwrError("learning rate must be strictly positive")
        if self.iterations < 1:
            raise OwrError("iteration count must be strictly positive")
        if self.batch_size < 1:
            raise OwrError("batch size must be strictly positive")
        if self.seed < 0:
            raise OwrError("seed must be a non-negative integer")
        if self.init_scale <= 0.0:
            raise OwrError("init scale must be strictly positive")


def _mean_table(means) -> tuple[np.ndarray, np.ndarray]:
    """Convert ``[(class_id, vector), ...]`` into id and matrix arrays."""
    if len(means) < 1:
        raise OwrError("at least one class mean is required")
    ids = np.array([int(c) for c, _ in means], dtype=np.int64)
    if np.unique(ids).size != ids.size:
        raise OwrError("duplicate class id in means")
    mat = np.array([np.asarray(v, dtype=np.float64).ravel() for _, v in means])
    if not np.all(np.isfinite(mat)):
        raise OwrError("class means must be finite")
    return ids, mat


def _label_indices(labels: np.ndarray, ids: np.ndarray) -> np.ndarray:
    pos = {int(c): i for i, c in enumerate(ids)}
    out = np.empty(labels.shape[0], dtype=np.int64)
    for i, lab in enumerate(labels):
        try:
            out[i] = pos[int(lab)]
        except KeyError:
            raise OwrError(f"label {int(lab)} has no registered class mean")
    return out


def _loss_grad(w, x, y_idx, mu, want_grad=True):
    n = x.shape[0]
    px = x @ w.T
    pm = mu @ w.T
    diff = px[:, None, :] - pm[None, :, :]
    sq = np.einsum("nkm,nkm->nk", diff, diff)
    z = -0.5 * sq
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1)
    rows = np.arange(n)
    loglik = (z[rows, y_idx] - zmax[:, 0]) - np.log(denom)
    loss = float(-loglik.mean())
    if not want_grad:
        return loss, None
    a = -(ez / denom[:, None])
    a[rows, y_idx] += 1.0
    r = a.sum(axis=1)
    s = a.sum(axis=0)
    cross = x.T @ (a @ mu)
    scatter = (x.T * r) @ x - cross - cross.T + (mu.T * s) @ mu
    return loss, (w @ scatter) / n


def ncm_loss(w, batch: LabeledDataset, means) -> float:
    """Mean negative log softmax probability of the true class over ``batch``.

    ``means`` is a list of ``(class_id, vector)`` pairs; every batch label
    must appear among the ids.  The softmax is stabilized by subtracting each
    sample's smallest squared projected distance, so well-separated data far
    from all means cannot overflow.
    """
    w = _check_w(w, batch.d)
    ids, mu = _mean_table(means)
    _check_mu_dim(mu, batch.d)
    y_idx = _label_indices(batch.labels, ids)
    loss, _ = _loss_grad(w, batch.features, y_idx, mu, want_grad=False)
    return loss


def ncm_loss_grad(w, batch: LabeledDataset, means) -> np.ndarray:
    """Gradient of ``ncm_loss`` with respect to the projection ``w``."""
    w = _check_w(w, batch.d)
    ids, mu = _mean_table(means)
    _check_mu_dim(mu, batch.d)
    y_idx = _label_indices(batch.labels, ids)
    _, grad = _loss_grad(w, batch.features, y_idx, mu)
    return grad


def finite_diff_check(w, batch: LabeledDataset, means, step: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    Loops over every entry of ``w``, so it is meant for verification at small
    sizes, not for training-time use.
    """
    if step <= 0.0:
        raise OwrError("finite difference step must be strictly positive")
    w = _check_w(w, batch.d)
    grad = ncm_loss_grad(w, batch, means)
    worst = 0.0
    for i in range(w.shape[0]):
        for j in range(w.shape[1]):
            wp = w.copy()
            wp[i, j] += step
            wm = w.copy()
            wm[i, j] -= step
            fd = (ncm_loss(wp, batch, means) - ncm_loss(wm, batch, means)) / (2 * step)
            err = abs(fd - grad[i, j]) / max(abs(fd), abs(grad[i, j]), 1e-12)
            worst = max(worst, err)
    return worst


def train_metric(ds: LabeledDataset, m: int, cfg: SgdConfig) -> MetricModel:
    """Learn an ``(m, d)`` projection by mini-batch SGD on ``ncm_loss``.

    Class means are computed once from ``ds`` and held fixed; only the
    projection moves.  The run is deterministic for a given (ds, m, cfg): the
    Gaussian initialization and every batch draw come from one seeded
    generator.  A held-out monitoring batch (never sampled for SGD) must not
    end with a higher loss than it started with, otherwise the run is
    reported as diverged.
    """
    from .ncm import class_means

    if m < 1 or m > ds.d:
        raise OwrError(f"projection rank {m} violates 1 <= m <= d={ds.d}")
    means = class_means(ds)
    if len(means) < 2:
        raise OwrError("metric training requires at least 2 classes")
    ids, mu = _mean_table(means)
    y_idx = _label_indices(ds.labels, ids)
    x = ds.features

    rng = np.random.default_rng(cfg.seed)
    w = rng.normal(0.0, cfg.init_scale, size=(m, ds.d))
    perm = rng.permutation(ds.n)
    n_monitor = max(1, min(cfg.batch_size, ds.n // 2))
    monitor, pool = perm[:n_monitor], perm[n_monitor:]
    if pool.size == 0:
        raise OwrError("dataset too small to hold out a monitoring batch")

    start_loss, _ = _loss_grad(w, x[monitor], y_idx[monitor], mu, want_grad=False)
    for it in range(cfg.iterations):
        b = pool[rng.integers(0, pool.size, size=cfg.batch_size)]
        loss, grad = _loss_grad(w, x[b], y_idx[b], mu)
        if not np.isfinite(loss):
            raise OwrError(f"non-finite training loss at iteration {it}")
        w = w - cfg.learning_rate * grad
    end_loss, _ = _loss_grad(w, x[monitor], y_idx[monitor], mu, want_grad=False)
    if not np.isfinite(end_loss) or end_loss > start_loss:
        raise OwrError(
            f"training diverged: monitoring loss went from {start_loss:.6g} "
            f"to {end_loss:.6g}"
        )
    return MetricModel(w)


def _check_w(w, d: int) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 1 or w.shape[0] > w.shape[1]:
        raise OwrError(f"projection shape {w.shape} violates 1 <= m <= d")
    if w.shape[1] != d:
        raise OwrError(f"projection expects {w.shape[1]} coordinates, data has {d}")
    return w


def _check_mu_dim(mu: np.ndarray, d: int) -> None:
    if mu.shape[1] != d:
        raise OwrError(f"class means have {mu.shape[1]} coordinates, data has {d}")


def _open_model(path):
    try:
        return open(path, "rb")
    except FileNotFoundError:
        raise OwrError(f"{path}: no such file")


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise OwrError(f"truncated model file while reading {what}")
    return data


def _read_struct(fh, fmt: str, what: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt), what))


def _expect_eof(fh, path) -> None:
    if fh.read(1):
        raise OwrError(f"{path}: trailing bytes after model payload")
