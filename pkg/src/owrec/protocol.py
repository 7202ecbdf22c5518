"""Open-world evaluation protocol: learn, grow, and measure at every stage.

The protocol splits classes into an initial-known set (used to fit
whitening, the metric, and the rejection/acceptance thresholds), an
incremental pool (classes added ``increment_size`` at a time as new means),
and an unknown set whose test rows are mixed into open-set evaluation at
every stage.  Row-level 80/20 train/test splits are made per class; test
rows are never seen by whitening, metric training, or threshold estimation.

At the initial stage and after each increment the report records top-1
accuracy for the closed-set and open-set variants of three classifiers
(plain nearest-mean, nearest-mean with distance rejection, and a
softmax-gated baseline) plus the multi-class and open-world error rates of
the rejecting classifier.

Everything downstream of the config is deterministic: one seed feeds
separate child streams for the class shuffle, the row splits, and the
threshold-estimation sub-split and folds.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import LabeledDataset, apply_whitening, compute_whitening
from .errors import OwrError
from .metric import SgdConfig, train_metric
from .ncm import (
    DEFAULT_THETA_GRID,
    NcmModel,
    predict_closed,
    predict_softmax_threshold,
)
from .nno import (
    NnoModel,
    TauSearchConfig,
    default_tau_grid,
    estimate_softmax_theta,
    estimate_tau,
    increment_learn,
    recognize,
)

TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class ProtocolConfig:
    initial_known: int
    increment_size: int
    stage_count: int
    unknown_count: int
    m: int
    sgd: SgdConfig
    fold_count: int = 3
    seed: int = 0
    tau_cfg: TauSearchConfig | None = None
    theta_grid: tuple[float, ...] = DEFAULT_THETA_GRID

    def __post_init__(self) -> None:
        if self.initial_known < 2:
            raise OwrError("at least 2 initial classes are required")
        if self.increment_size < 1:
            raise OwrError("increment size must be positive")
        if self.stage_count < 0:
            raise OwrError("stage count must be non-negative")
        if self.unknown_count < 0:
            raise OwrError("unknown class count must be non-negative")
        if self.m < 1:
            raise OwrError("projected dimension must be positive")
        if self.fold_count < 2:
            raise OwrError("fold count must be at least 2")
        if self.seed < 0:
            raise OwrError("seed must be a non-negative integer")
        object.__setattr__(self, "theta_grid", tuple(float(t) for t in self.theta_grid))

    @property
    def class_budget(self) -> int:
        return (
            self.initial_known
            + self.increment_size * self.stage_count
            + self.unknown_count
        )


@dataclass(frozen=True)
class StageResult:
    known_classes: int
    cs_ncm_top1: float
    os_ncm_top1: float
    cs_nno_top1: float
    os_nno_top1: float
    os_ncm_sth_top1: float
    eps_k: float
    eps_ow: float

    def __post_init__(self) -> None:
        for name in (
            "cs_ncm_top1",
            "os_ncm_top1",
            "cs_nno_top1",
            "os_nno_top1",
            "os_ncm_sth_top1",
            "eps_k",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise OwrError(f"{name}={v} outside [0, 1]")
        if not 0.0 <= self.eps_ow <= 2.0:
            raise OwrError(f"eps_ow={self.eps_ow} outside [0, 2]")


@dataclass(frozen=True)
class EvalReport:
    config: ProtocolConfig
    tau_cfg: TauSearchConfig
    tau: float
    theta: float
    stages: tuple[StageResult, ...]
    timings: dict

    def __post_init__(self) -> None:
        if len(self.stages) != self.config.stage_count + 1:
            raise OwrError(
                f"report has {len(self.stages)} stage rows, expected "
                f"{self.config.stage_count + 1}"
            )


@dataclass(frozen=True)
class ProtocolPlan:
    """Class assignments and per-class row splits, fully determined by the seed."""

    initial_ids: tuple[int, ...]
    stage_ids: tuple[tuple[int, ...], ...]
    unknown_ids: tuple[int, ...]
    tau_known_ids: tuple[int, ...]
    tau_unknown_ids: tuple[int, ...]
    train_rows: dict
    test_rows: dict


def top1_accuracy(predictions, truth) -> float:
    """Fraction of exact label matches (0 counts as a label like any other)."""
    preds, true = _aligned(predictions, truth)
    return float(np.count_nonzero(preds == true)) / true.shape[0]


def multiclass_error(predictions, truth) -> float:
    """Mismatch fraction over known-category truth (no 0 labels allowed)."""
    preds, true = _aligned(predictions, truth)
    if np.any(true == 0):
        raise OwrError("multiclass error is defined over known-category truth only")
    return float(np.count_nonzero(preds != true)) / true.shape[0]


def open_world_error(known_preds, known_truth, unknown_preds) -> float:
    """Multi-class error on knowns plus the accepted fraction of unknowns.

    With no unknown samples the second term is vacuous and defined as 0.
    """
    eps_k = multiclass_error(known_preds, known_truth)
    unknown = np.asarray(unknown_preds, dtype=np.int64).ravel()
    if unknown.shape[0] == 0:
        return eps_k
    return eps_k + float(np.count_nonzero(unknown != 0)) / unknown.shape[0]


def _aligned(predictions, truth) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(truth, dtype=np.int64).ravel()
    if preds.shape != true.shape:
        raise OwrError(
            f"{preds.shape[0]} predictions against {true.shape[0]} truth labels"
        )
    if true.shape[0] < 1:
        raise OwrError("accuracy over an empty prediction list is undefined")
    return preds, true


def plan_protocol(ds: LabeledDataset, cfg: ProtocolConfig) -> ProtocolPlan:
    """Seeded class assignment and per-class 80/20 train/test row splits.

    The threshold-estimation sub-split reserves about a third of the initial
    classes (at least one) to play the unknown role; only training rows ever
    feed threshold estimation.
    """
    classes = ds.class_ids()
    if cfg.class_budget > classes.size:
        raise OwrError(
            f"class budget {cfg.class_budget} exceeds the {classes.size} classes "
            "present in the dataset"
        )
    seeds = np.random.SeedSequence(cfg.seed).generate_state(5, dtype=np.uint64)
    order = np.random.default_rng(int(seeds[0])).permutation(classes)

    initial = tuple(sorted(int(c) for c in order[: cfg.initial_known]))
    stage_ids = []
    at = cfg.initial_known
    for _ in range(cfg.stage_count):
        stage_ids.append(tuple(sorted(int(c) for c in order[at : at + cfg.increment_size])))
        at += cfg.increment_size
    unknown = tuple(sorted(int(c) for c in order[at : at + cfg.unknown_count]))

    row_rng = np.random.default_rng(int(seeds[1]))
    used = sorted(initial + tuple(c for s in stage_ids for c in s) + unknown)
    train_rows, test_rows = {}, {}
    for c in used:
        idx = row_rng.permutation(np.where(ds.labels == c)[0])
        n_train = int(round(TRAIN_FRACTION * idx.size))
        n_train = min(max(n_train, 1), idx.size - 1)
        if idx.size < 2:
            raise OwrError(f"class {c} needs at least 2 rows to split train/test")
        train_rows[c] = np.sort(idx[:n_train])
        test_rows[c] = np.sort(idx[n_train:])

    sub_rng = np.random.default_rng(int(seeds[2]))
    sub_order = sub_rng.permutation(np.array(initial))
    n_sub_unknown = max(1, cfg.initial_known // 3)
    tau_unknown = tuple(sorted(int(c) for c in sub_order[:n_sub_unknown]))
    tau_known = tuple(sorted(int(c) for c in sub_order[n_sub_unknown:]))
    return ProtocolPlan(
        initial, tuple(stage_ids), unknown, tau_known, tau_unknown, train_rows, test_rows
    )


def _rows(plan_rows: dict, ids) -> np.ndarray:
    if not ids:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([plan_rows[c] for c in ids])


def run_open_world_protocol(ds: LabeledDataset, cfg: ProtocolConfig) -> EvalReport:
    """Execute the full protocol on ``ds`` and collect per-stage metrics.

    Phases: fit whitening on initial-known training rows and apply it
    everywhere; train the metric on those rows; estimate the rejection
    radius and the softmax threshold on a training-only sub-split; then
    evaluate, repeatedly add ``increment_size`` class means from training
    rows, and re-evaluate.  The unknown test rows are the same at every
    stage.
    """
    plan = plan_protocol(ds, cfg)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(5, dtype=np.uint64)
    timings: dict = {}

    t0 = time.perf_counter()
    stats = compute_whitening(ds.subset(_rows(plan.train_rows, plan.initial_ids)))
    wds = apply_whitening(stats, ds)
    initial_train = wds.subset(_rows(plan.train_rows, plan.initial_ids))
    timings["whitening"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    metric = train_metric(initial_train, cfg.m, cfg.sgd)
    timings["metric_training"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    sub_known = wds.subset(_rows(plan.train_rows, plan.tau_known_ids))
    sub_unknown = wds.subset(_rows(plan.train_rows, plan.tau_unknown_ids))
    tau_cfg = cfg.tau_cfg
    if tau_cfg is None:
        grid = tuple(float(t) for t in default_tau_grid(sub_known, metric))
        tau_cfg = TauSearchConfig(grid, cfg.fold_count, int(seeds[3]))
    tau = estimate_tau(sub_known, sub_unknown, metric, tau_cfg)
    theta = estimate_softmax_theta(
        sub_known, sub_unknown, metric, cfg.theta_grid, cfg.fold_count, int(seeds[4])
    )
    timings["threshold_estimation"] = time.perf_counter() - t0

    model = NnoModel(NcmModel.from_dataset(metric, initial_train), tau)
    unknown_test = (
        wds.subset(_rows(plan.test_rows, plan.unknown_ids))
        if plan.unknown_ids
        else None
    )

    timings["incremental_updates"] = 0.0
    timings["evaluation"] = 0.0
    known_ids = list(plan.initial_ids)
    stages = []

    t0 = time.perf_counter()
    stages.append(_eval_stage(model, theta, wds.subset(_rows(plan.test_rows, known_ids)), unknown_test))
    timings["evaluation"] += time.perf_counter() - t0

    for step, new_ids in enumerate(plan.stage_ids, start=1):
        t0 = time.perf_counter()
        for c in new_ids:
            try:
                model = increment_learn(model, wds.subset(plan.train_rows[c]))
            except OwrError as e:
                raise OwrError(f"stage {step}, class {c}: {e}")
        timings["incremental_updates"] += time.perf_counter() - t0
        known_ids.extend(new_ids)
        t0 = time.perf_counter()
        stages.append(
            _eval_stage(model, theta, wds.subset(_rows(plan.test_rows, known_ids)), unknown_test)
        )
        timings["evaluation"] += time.perf_counter() - t0

    return EvalReport(cfg, tau_cfg, tau, theta, tuple(stages), timings)


def _eval_stage(
    model: NnoModel,
    theta: float,
    known_test: LabeledDataset,
    unknown_test: LabeledDataset | None,
) -> StageResult:
    ncm = model.ncm
    ky = known_test.labels
    ncm_k = np.array([predict_closed(ncm, x) for x in known_test.features])
    nno_k = np.array([recognize(model, x) for x in known_test.features])
    sth_k = np.array(
        [predict_softmax_threshold(ncm, x, theta) for x in known_test.features]
    )
    if unknown_test is not None and unknown_test.n:
        ncm_u = np.array([predict_closed(ncm, x) for x in unknown_test.features])
        nno_u = np.array([recognize(model, x) for x in unknown_test.features])
        sth_u = np.array(
            [predict_softmax_threshold(ncm, x, theta) for x in unknown_test.features]
        )
        zeros = np.zeros(unknown_test.n, dtype=np.int64)
    else:
        ncm_u = nno_u = sth_u = zeros = np.zeros(0, dtype=np.int64)
    os_truth = np.concatenate([ky, zeros])
    return StageResult(
        known_classes=ncm.class_count,
        cs_ncm_top1=top1_accuracy(ncm_k, ky),
        os_ncm_top1=top1_accuracy(np.concatenate([ncm_k, ncm_u]), os_truth),
        cs_nno_top1=top1_accuracy(nno_k, ky),
        os_nno_top1=top1_accuracy(np.concatenate([nno_k, nno_u]), os_truth),
        os_ncm_sth_top1=top1_accuracy(np.concatenate([sth_k, sth_u]), os_truth),
        eps_k=multiclass_error(nno_k, ky),
        eps_ow=open_world_error(nno_k, ky, nno_u),
    )


STAGES_HEADER = "known_classes,cs_ncm,os_ncm,cs_nno,os_nno,os_ncm_sth,eps_k,eps_ow"


def emit_report(report: EvalReport, out_dir) -> None:
    """Write ``stages.csv`` and ``config.txt`` under ``out_dir``.

    Output is byte-identical across runs with the same config and seed:
    floats are rendered with ``repr`` and no timestamps are written.
    """
    if len(report.stages) < 1:
        raise OwrError("cannot emit a report with no stage results")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "stages.csv", "w", newline="\n") as fh:
        fh.write(STAGES_HEADER + "\n")
        for s in report.stages:
            fh.write(
                ",".join(
                    [str(s.known_classes)]
                    + [
                        repr(float(v))
                        for v in (
                            s.cs_ncm_top1,
                            s.os_ncm_top1,
                            s.cs_nno_top1,
                            s.os_nno_top1,
                            s.os_ncm_sth_top1,
                            s.eps_k,
                            s.eps_ow,
                        )
                    ]
                )
                + "\n"
            )
    cfg, sgd = report.config, report.config.sgd
    lines = [
        f"initial_known={cfg.initial_known}",
        f"increment_size={cfg.increment_size}",
        f"stage_count={cfg.stage_count}",
        f"unknown_count={cfg.unknown_count}",
        f"m={cfg.m}",
        f"fold_count={cfg.fold_count}",
        f"seed={cfg.seed}",
        f"sgd.learning_rate={repr(float(sgd.learning_rate))}",
        f"sgd.iterations={sgd.iterations}",
        f"sgd.batch_size={sgd.batch_size}",
        f"sgd.seed={sgd.seed}",
        f"sgd.init_scale={repr(float(sgd.init_scale))}",
        "tau_grid=" + ",".join(repr(float(t)) for t in report.tau_cfg.grid),
        f"tau_fold_count={report.tau_cfg.fold_count}",
        f"tau_seed={report.tau_cfg.seed}",
        "theta_grid=" + ",".join(repr(float(t)) for t in cfg.theta_grid),
        f"tau={repr(float(report.tau))}",
        f"theta={repr(float(report.theta))}",
    ]
    with open(out / "config.txt", "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
