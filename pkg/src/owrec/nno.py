"""Open-set recognition by nearest non-outlier scoring.

Each class carries a cone-shaped score over the projected space: the score
at projected distance ``rho`` from the class mean is

    norm_const * max(0, 1 - rho / tau)

with ``norm_const = Gamma(m/2 + 1) / (pi^(m/2) * tau^m)``, the inverse
volume of an ``m``-ball of radius ``tau``, so the cone's support is exactly
that ball.  A point is recognized as its nearest class when the distance
(not squared) is below ``tau`` and rejected as unknown (label 0) otherwise.

The rejection radius ``tau`` and the softmax-gate threshold used by the
baseline are both picked by seeded stratified cross-validation: each fold
scores a candidate grid by F1 over "accepted and correct" decisions and the
per-fold winners are averaged (ties go to the smallest candidate).

Serialized models append a single little-endian float64 ``tau`` to the
nearest-class-mean layout; the normalizing constant is recomputed on load.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .dataio import LabeledDataset, make_folds
from .errors import OwrError
from .metric import MetricModel, _expect_eof, _mean_table, _open_model, _read_struct
from .ncm import NcmModel, class_means

_NORM_TOL = 1e-12


def inverse_ball_volume(dim: int, radius: float) -> float:
    """1 / volume of the ``dim``-ball with the given radius."""
    if dim < 1:
        raise OwrError(f"dimension must be positive, got {dim}")
    if radius <= 0.0:
        raise OwrError(f"radius must be positive, got {radius}")
    return math.gamma(dim / 2 + 1) / (math.pi ** (dim / 2) * radius**dim)


@dataclass(frozen=True, eq=False)
class NnoModel:
    """Nearest-class-mean model plus a rejection radius in projected space."""

    ncm: NcmModel
    tau: float
    norm_const: float | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.tau) and self.tau > 0.0):
            raise OwrError(f"tau must be a positive finite real, got {self.tau}")
        expected = inverse_ball_volume(self.ncm.metric.m, self.tau)
        if self.norm_const is None:
            object.__setattr__(self, "norm_const", expected)
        elif abs(self.norm_const - expected) > _NORM_TOL * expected:
            raise OwrError(
                f"normalizing constant {self.norm_const!r} inconsistent with "
                f"tau={self.tau!r} in {self.ncm.metric.m} projected dimensions"
            )

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            self.ncm._write(fh)
            fh.write(struct.pack("<d", self.tau))

    @classmethod
    def load(cls, path) -> "NnoModel":
        with _open_model(path) as fh:
            ncm = NcmModel._read(fh)
            (tau,) = _read_struct(fh, "<d", "rejection radius")
            _expect_eof(fh, path)
        return cls(ncm, tau)


@dataclass(frozen=True)
class TauSearchConfig:
    """Grid and fold settings for ``estimate_tau``."""

    grid: tuple[float, ...]
    fold_count: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        grid = tuple(float(t) for t in self.grid)
        if len(grid) < 1:
            raise OwrError("tau grid must be non-empty")
        if grid[0] <= 0.0:
            raise OwrError("tau candidates must be positive")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise OwrError("tau grid must be strictly increasing")
        if self.fold_count < 2:
            raise OwrError(f"fold count must be at least 2, got {self.fold_count}")
        if self.seed < 0:
            raise OwrError("seed must be a non-negative integer")
        object.__setattr__(self, "grid", grid)


def nno_score(model: NnoModel, x, class_index: int) -> float:
    """Cone score of class ``class_index`` at ``x``; 0 outside the tau-ball."""
    from .ncm import dist_w

    rho = math.sqrt(dist_w(model.ncm, x, class_index))
    return model.norm_const * max(0.0, 1.0 - rho / model.tau)


def recognize(model: NnoModel, x) -> int:
    """Nearest class id if its projected distance is below tau, else 0."""
    from .ncm import _sq_dists

    sq = _sq_dists(model.ncm, x)
    best = int(np.argmin(sq))
    if math.sqrt(sq[best]) < model.tau:
        return model.ncm.ids[best]
    return 0


def f1_at_tau(predictions, truth) -> float:
    """F1 of accept-and-correct decisions; label 0 means rejected / unknown.

    Precision counts over accepted predictions, recall over truly known
    samples; both empty denominators yield 0.
    """
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(truth, dtype=np.int64).ravel()
    if preds.shape != true.shape:
        raise OwrError(
            f"{preds.shape[0]} predictions against {true.shape[0]} truth labels"
        )
    accepted = preds != 0
    known = true != 0
    tp = int(np.count_nonzero(accepted & known & (preds == true)))
    if tp == 0 or not accepted.any() or not known.any():
        return 0.0
    precision = tp / int(np.count_nonzero(accepted))
    recall = tp / int(np.count_nonzero(known))
    return 2.0 * precision * recall / (precision + recall)


def _fold_stats(known, unknown, metric, fold_count, seed):
    """Per fold: truth labels, nearest mean ids, distances, and max posteriors.

    Fold means are computed from the fold's training side only; the whole
    unknown set is appended to every validation side with truth label 0.
    """
    if unknown.n < 1:
        raise OwrError("tau estimation requires a non-empty unknown set")
    if unknown.d != known.d:
        raise OwrError("known and unknown sets must share feature dimensions")
    for train, val in make_folds(known, fold_count, seed):
        ids, mu = _mean_table(class_means(train))
        pm = metric.project(mu)
        px = metric.project(np.vstack([val.features, unknown.features]))
        truth = np.concatenate([val.labels, np.zeros(unknown.n, dtype=np.int64)])
        diff = px[:, None, :] - pm[None, :, :]
        sq = np.einsum("nkm,nkm->nk", diff, diff)
        best = sq.argmin(axis=1)
        rows = np.arange(sq.shape[0])
        dmin = np.sqrt(sq[rows, best])
        ez = np.exp(-0.5 * (sq - sq.min(axis=1, keepdims=True)))
        pmax = 1.0 / ez.sum(axis=1)  # the max term's stabilized exponent is 1
        yield truth, ids[best], dmin, pmax


def estimate_tau(
    known: LabeledDataset,
    unknown: LabeledDataset,
    metric: MetricModel,
    cfg: TauSearchConfig,
) -> float:
    """Cross-validated rejection radius: mean over folds of the best-F1 candidate."""
    winners = []
    for truth, nearest, dmin, _ in _fold_stats(
        known, unknown, metric, cfg.fold_count, cfg.seed
    ):
        best_tau, best_f1 = cfg.grid[0], -1.0
        for tau in cfg.grid:
            f1 = f1_at_tau(np.where(dmin < tau, nearest, 0), truth)
            if f1 > best_f1:
                best_tau, best_f1 = tau, f1
        winners.append(best_tau)
    return float(np.mean(winners))


def estimate_softmax_theta(
    known: LabeledDataset,
    unknown: LabeledDataset,
    metric: MetricModel,
    grid,
    fold_count: int = 3,
    seed: int = 0,
) -> float:
    """Same fold-averaged F1 search, for the softmax acceptance threshold."""
    grid = tuple(float(t) for t in grid)
    if len(grid) < 1:
        raise OwrError("theta grid must be non-empty")
    if any(not 0.0 <= t <= 1.0 for t in grid):
        raise OwrError("theta candidates must lie in [0, 1]")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise OwrError("theta grid must be strictly increasing")
    winners = []
    for truth, nearest, _, pmax in _fold_stats(known, unknown, metric, fold_count, seed):
        best_theta, best_f1 = grid[0], -1.0
        for theta in grid:
            f1 = f1_at_tau(np.where(pmax >= theta, nearest, 0), truth)
            if f1 > best_f1:
                best_theta, best_f1 = theta, f1
        winners.append(best_theta)
    return float(np.mean(winners))


def default_tau_grid(
    known: LabeledDataset, metric: MetricModel, count: int = 40
) -> np.ndarray:
    """Geometric grid bracketing the projected distance scales in ``known``.

    Spans from the 1st percentile of within-class projected distances up to
    twice the 99th percentile of between-class projected mean gaps, so the
    useful band (accept own class, reject far clusters) is always covered.
    """
    if count < 1:
        raise OwrError("grid size must be positive")
    ids, mu = _mean_table(class_means(known))
    pm = metric.project(mu)
    px = metric.project(known.features)
    within = []
    for i, c in enumerate(ids):
        rows = px[known.labels == c] - pm[i]
        within.append(np.sqrt(np.einsum("nm,nm->n", rows, rows)))
    within = np.concatenate(within)
    lo = float(np.percentile(within[within > 0.0], 1.0)) if np.any(within > 0) else 1.0
    if len(ids) > 1:
        gaps = pm[:, None, :] - pm[None, :, :]
        gap = np.sqrt(np.einsum("ijm,ijm->ij", gaps, gaps))
        hi = 2.0 * float(np.percentile(gap[np.triu_indices(len(ids), k=1)], 99.0))
    else:
        hi = 4.0 * float(within.max()) if within.max() > 0 else 4.0
    if hi <= lo:
        hi = 4.0 * lo
    if count == 1:
        return np.array([lo])
    return np.geomspace(lo, hi, count)


def increment_learn(model: NnoModel, new_class_data: LabeledDataset) -> NnoModel:
    """Register one novel class from its labeled samples; tau is untouched.

    The result is exactly the model that would have been built had the class
    been present from the start, so adding several classes is insensitive to
    the order of the additions.
    """
    ids = np.unique(new_class_data.labels)
    if ids.size != 1:
        raise OwrError(
            f"new class data must carry exactly one label, found {ids.size}"
        )
    new_id = int(ids[0])
    if new_id in model.ncm.ids:
        raise OwrError(f"class {new_id} is already registered")
    pairs = list(zip(model.ncm.ids, model.ncm.means))
    pairs.append((new_id, new_class_data.features.mean(axis=0)))
    return NnoModel(NcmModel.build(model.ncm.metric, pairs), model.tau)
