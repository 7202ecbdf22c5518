"""Monte Carlo auditing of open-space risk for recognition score functions.

Risk is the score-weighted fraction of an enclosing ball that lies in "open
space", i.e. outside every radius-``r`` ball around the labeled training
points:

    risk = sum_i s(z_i) * [min_j ||z_i - p_j|| > r] / sum_i s(z_i)

with ``z_i`` drawn uniformly from the enclosing ball.  The standard error of
this ratio estimator comes from the delta method for a ratio of sample
means.  Estimates are deterministic for a fixed seed and sample count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import OwrError
from .nno import inverse_ball_volume

_CHUNK = 1 << 18


@dataclass(frozen=True, eq=False)
class RiskProblem:
    """Geometry and score function for one audit.

    ``score_fn`` maps an ``(n, d)`` array of points to ``n`` non-negative
    scores.  ``training_points`` is ``(t, d)``; every training point must lie
    inside the enclosing ball of radius ``r_o`` around ``center_o``, and the
    labeled-ball radius ``r`` must be smaller than ``r_o``.
    """

    score_fn: Callable | None
    training_points: np.ndarray
    r: float
    r_o: float
    center_o: np.ndarray

    def __post_init__(self) -> None:
        pts = np.array(self.training_points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise OwrError("training points must form a non-empty (t, d) matrix")
        center = np.array(self.center_o, dtype=np.float64, copy=True).ravel()
        if center.shape[0] != pts.shape[1]:
            raise OwrError(
                f"center has {center.shape[0]} coordinates, points have {pts.shape[1]}"
            )
        if not (math.isfinite(self.r) and self.r > 0.0):
            raise OwrError(f"labeled ball radius must be positive, got {self.r}")
        if not (math.isfinite(self.r_o) and self.r_o > self.r):
            raise OwrError(
                f"enclosing radius {self.r_o} must exceed labeled radius {self.r}"
            )
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(center))):
            raise OwrError("training points and center must be finite")
        far = np.linalg.norm(pts - center, axis=1)
        if np.any(far > self.r_o):
            raise OwrError(
                f"training point {int(np.argmax(far > self.r_o))} lies outside "
                "the enclosing ball"
            )
        pts.setflags(write=False)
        center.setflags(write=False)
        object.__setattr__(self, "training_points", pts)
        object.__setattr__(self, "center_o", center)

    @property
    def dim(self) -> int:
        return self.training_points.shape[1]


@dataclass(frozen=True)
class RiskEstimate:
    risk: float
    std_error: float
    samples: int


@dataclass(frozen=True, eq=False)
class CapModel:
    """A score function with bounded support: zero outside a known ball."""

    score_fn: Callable
    center: np.ndarray
    support_radius: float

    def __post_init__(self) -> None:
        center = np.array(self.center, dtype=np.float64, copy=True).ravel()
        if not (math.isfinite(self.support_radius) and self.support_radius > 0.0):
            raise OwrError("support radius must be positive")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)

    def __call__(self, points) -> np.ndarray:
        return self.score_fn(points)


def cone_model(center, radius: float) -> CapModel:
    """Linearly abating score: inverse-ball-volume peak at ``center``, zero at ``radius``."""
    center = np.asarray(center, dtype=np.float64).ravel()
    peak = inverse_ball_volume(center.shape[0], radius)

    def score(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dist = np.linalg.norm(pts - center, axis=1)
        return peak * np.clip(1.0 - dist / radius, 0.0, None)

    return CapModel(score, center, radius)


def sample_uniform_ball(
    rng: np.random.Generator, count: int, dim: int, center, radius: float
) -> np.ndarray:
    """Uniform draws from a ball: random directions scaled by ``radius * u^(1/dim)``."""
    g = rng.standard_normal((count, dim))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    u = rng.random(count) ** (1.0 / dim)
    return np.asarray(center, dtype=np.float64) + radius * g * u[:, None]


def estimate_open_space_risk(
    problem: RiskProblem, n_samples: int, seed: int
) -> RiskEstimate:
    """Monte Carlo open-space risk of ``problem.score_fn``.

    Raises if the score is zero over the entire sample (no positive labeled
    region means the ratio is undefined, not zero).  Sampling is chunked so
    memory stays bounded at large ``n_samples``.
    """
    if problem.score_fn is None:
        raise OwrError("risk problem has no score function attached")
    if n_samples < 1:
        raise OwrError("sample count must be positive")
    rng = np.random.default_rng(seed)
    r_sq = problem.r * problem.r
    sum_f = sum_g = sum_ff = sum_gg = sum_fg = 0.0
    remaining = n_samples
    while remaining > 0:
        count = min(remaining, _CHUNK)
        remaining -= count
        pts = sample_uniform_ball(rng, count, problem.dim, problem.center_o, problem.r_o)
        scores = np.asarray(problem.score_fn(pts), dtype=np.float64).ravel()
        if scores.shape[0] != count:
            raise OwrError(
                f"score function returned {scores.shape[0]} values for {count} points"
            )
        if not np.all(np.isfinite(scores)):
            raise OwrError("score function returned a non-finite value")
        if np.any(scores < 0.0):
            raise OwrError("score function returned a negative value")
        sq_min = np.full(count, np.inf)
        for p in problem.training_points:
            diff = pts - p
            np.minimum(sq_min, np.einsum("nd,nd->n", diff, diff), out=sq_min)
        f = scores * (sq_min > r_sq)
        sum_f += float(f.sum())
        sum_g += float(scores.sum())
        sum_ff += float((f * f).sum())
        sum_gg += float((scores * scores).sum())
        sum_fg += float((f * scores).sum())
    if sum_g == 0.0:
        raise OwrError(
            "no positive labeled region: score is zero over the enclosing ball sample"
        )
    risk = sum_f / sum_g
    n = n_samples
    f_bar, g_bar = sum_f / n, sum_g / n
    var_f = sum_ff / n - f_bar * f_bar
    var_g = sum_gg / n - g_bar * g_bar
    cov = sum_fg / n - f_bar * g_bar
    var_ratio = (var_f - 2.0 * risk * cov + risk * risk * var_g) / (n * g_bar * g_bar)
    return RiskEstimate(float(risk), math.sqrt(max(var_ratio, 0.0)), n)


def combine_cap_models(weights, models) -> Callable:
    """Convex-style combination sum_j c_j * model_j with weights in [0, 1]."""
    weights = [float(c) for c in weights]
    models = list(models)
    if len(weights) != len(models):
        raise OwrError(f"{len(weights)} weights for {len(models)} models")
    if len(models) < 1:
        raise OwrError("at least one model is required")
    if any(not 0.0 <= c <= 1.0 for c in weights):
        raise OwrError("combination weights must lie in [0, 1]")

    def combined(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        total = np.zeros(pts.shape[0])
        for c, model in zip(weights, models):
            total += c * np.asarray(model(pts), dtype=np.float64)
        return total

    return combined


def audit_combination_threshold(
    models,
    problem: RiskProblem,
    n_samples: int,
    seed: int,
    weights=None,
    check_support: bool = True,
) -> RiskEstimate:
    """Risk of a weighted combination of bounded-support models.

    When every model's support ball sits inside some labeled ball the
    combination provably has zero open-space risk, and with
    ``check_support=True`` a violated containment raises instead of
    auditing.  Pass ``check_support=False`` to measure how much risk a
    containment violation actually leaks.
    """
    models = list(models)
    if weights is None:
        weights = [1.0] * len(models)
    if check_support:
        for j, model in enumerate(models):
            if model.center.shape[0] != problem.dim:
                raise OwrError(f"model {j} dimension does not match the problem")
            reach = np.min(
                np.linalg.norm(problem.training_points - model.center, axis=1)
            ) + model.support_radius
            if reach > problem.r:
                raise OwrError(
                    f"model {j} support ball (reach {reach:.6g}) is not contained "
                    f"in any labeled ball of radius {problem.r:.6g}"
                )
    combined = combine_cap_models(weights, models)
    return estimate_open_space_risk(
        replace(problem, score_fn=combined), n_samples, seed
    )


def audit_transform(
    score_lowdim: Callable,
    transform,
    problem: RiskProblem,
    n_samples: int,
    seed: int,
) -> tuple[RiskEstimate, RiskEstimate]:
    """Risk of a projected-space score, measured in both spaces.

    ``transform`` is an ``(m, d)`` map applied to ambient points;
    ``score_lowdim`` scores points of the ``m``-dimensional projected space.
    Returns (projected-space risk, ambient-space risk).  The ambient audit
    scores ambient samples through the transform; the projected audit maps
    the training points and enclosing center through the transform and keeps
    the same radii and seed.
    """
    t = np.asarray(transform, dtype=np.float64)
    if t.ndim != 2:
        raise OwrError(f"transform must be a 2-d matrix, got shape {t.shape}")
    if t.shape[1] != problem.dim:
        raise OwrError(
            f"transform expects {t.shape[1]} ambient coordinates, problem has {problem.dim}"
        )
    if t.shape[0] > t.shape[1]:
        raise OwrError("transform must not increase dimension")

    def ambient_score(points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return score_lowdim(pts @ t.T)

    high = estimate_open_space_risk(
        replace(problem, score_fn=ambient_score), n_samples, seed
    )
    low_problem = RiskProblem(
        score_fn=score_lowdim,
        training_points=problem.training_points @ t.T,
        r=problem.r,
        r_o=problem.r_o,
        center_o=t @ problem.center_o,
    )
    low = estimate_open_space_risk(low_problem, n_samples, seed)
    return low, high


@dataclass(frozen=True)
class AuditRow:
    """One line of the canned audit battery."""

    name: str
    dims: int
    samples: int
    risk: float
    std_error: float
    seed: int


def run_audit_battery(n_samples: int, seed: int) -> list[AuditRow]:
    """Deterministic suite of audits with known geometry.

    Covers: a cone truncated at half its radius (risk 1/2 analytically), a
    constant score over a disk (risk 1 - (r/r_o)^2 in 2-d), a combination
    whose supports are inside labeled balls (risk 0), the same construction
    with the containment deliberately broken, an orthogonal change of
    coordinates (projected and ambient risks agree), a genuine projection
    (projected risk 0, ambient risk reported), and a sweep of the labeled
    radius against a fixed cone.
    """
    rows: list[AuditRow] = []
    origin2 = np.zeros(2)

    def run(name, problem):
        est = estimate_open_space_risk(problem, n_samples, seed)
        rows.append(
            AuditRow(name, problem.dim, est.samples, est.risk, est.std_error, seed)
        )

    cone = cone_model(origin2, 1.0)
    run(
        "cone_half_labeled",
        RiskProblem(cone, origin2[None, :], r=0.5, r_o=2.0, center_o=origin2),
    )
    run(
        "constant_disk",
        RiskProblem(
            lambda pts: np.ones(np.atleast_2d(pts).shape[0]),
            origin2[None, :],
            r=1.0,
            r_o=2.0,
            center_o=origin2,
        ),
    )

    pts = np.array([[-1.5, 0.0], [1.5, 0.0]])
    contained = [cone_model(p, 0.5) for p in pts]
    template = RiskProblem(None, pts, r=0.5, r_o=4.0, center_o=origin2)
    est = audit_combination_threshold(contained, template, n_samples, seed)
    rows.append(AuditRow("combination_contained", 2, est.samples, est.risk, est.std_error, seed))
    leaking = [cone_model(p, 1.0) for p in pts]
    est = audit_combination_threshold(
        leaking, template, n_samples, seed, check_support=False
    )
    rows.append(AuditRow("combination_leaking", 2, est.samples, est.risk, est.std_error, seed))

    angle = math.pi / 6
    rot = np.array(
        [[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]]
    )
    anchor = np.array([[1.0, 0.0]])
    rot_problem = RiskProblem(None, anchor, r=0.75, r_o=3.0, center_o=origin2)
    low, high = audit_transform(
        cone_model(rot @ anchor[0], 1.5), rot, rot_problem, n_samples, seed
    )
    rows.append(AuditRow("rotation_projected", 2, low.samples, low.risk, low.std_error, seed))
    rows.append(AuditRow("rotation_ambient", 2, high.samples, high.risk, high.std_error, seed))

    proj = np.array([[1.0, 0.0]])
    proj_problem = RiskProblem(None, np.zeros((1, 2)), r=0.5, r_o=2.0, center_o=origin2)
    low, high = audit_transform(
        cone_model(np.zeros(1), 0.4), proj, proj_problem, n_samples, seed
    )
    rows.append(AuditRow("projection_low", 1, low.samples, low.risk, low.std_error, seed))
    rows.append(AuditRow("projection_ambient", 2, high.samples, high.risk, high.std_error, seed))

    for frac in (0.25, 0.5, 0.75):
        run(
            f"cone_labeled_{frac}",
            RiskProblem(cone, origin2[None, :], r=frac, r_o=2.0, center_o=origin2),
        )
    return rows
