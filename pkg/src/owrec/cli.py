"""Command-line interface covering the pipeline end to end.

Every randomized subcommand takes an explicit ``--seed`` and is fully
deterministic given its flags.  Exit status: 0 on success, 1 on a domain or
I/O error (message on stderr), 2 on a usage error (argparse).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .dataio import (
    apply_whitening,
    compute_whitening,
    gen_synthetic,
    load_features,
    save_features,
)
from .errors import OwrError
from .metric import MetricModel, SgdConfig, train_metric
from .ncm import NcmModel, class_means
from .nno import NnoModel, TauSearchConfig, default_tau_grid, estimate_tau, recognize
from .protocol import ProtocolConfig, emit_report, run_open_world_protocol
from .risk import run_audit_battery


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except OwrError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owrec",
        description="Open-world recognition over feature vectors: synthesize "
        "data, learn a metric, estimate a rejection radius, grow the "
        "classifier, evaluate, and audit open-space risk.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic Gaussian-blob dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--per-class", type=int, required=True)
    p.add_argument("--separation", type=float, required=True)
    p.add_argument("--spread", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output path (.csv or binary)")
    p.set_defaults(run=_cmd_gen_synth)

    p = sub.add_parser("whiten", help="standardize features per coordinate")
    p.add_argument("--data", required=True)
    p.add_argument(
        "--fit",
        default=None,
        help="dataset to fit the statistics on (defaults to --data)",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_whiten)

    p = sub.add_parser("train-metric", help="learn a low-rank projection by SGD")
    p.add_argument("--data", required=True)
    p.add_argument("--m", type=int, required=True, help="projected dimension")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--learning-rate", type=float, default=SgdConfig.learning_rate)
    p.add_argument("--iterations", type=int, default=SgdConfig.iterations)
    p.add_argument("--batch-size", type=int, default=SgdConfig.batch_size)
    p.add_argument("--init-scale", type=float, default=SgdConfig.init_scale)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_train_metric)

    p = sub.add_parser(
        "estimate-tau", help="cross-validate the rejection radius on held-out classes"
    )
    p.add_argument("--known", required=True)
    p.add_argument("--unknown", required=True)
    p.add_argument("--metric", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument(
        "--grid",
        default=None,
        help="comma-separated tau candidates (default: derived from the known set)",
    )
    p.add_argument(
        "--out",
        default=None,
        help="also write a rejecting classifier built from the known set",
    )
    p.set_defaults(run=_cmd_estimate_tau)

    p = sub.add_parser("add-classes", help="register novel classes from labeled data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(run=_cmd_add_classes)

    p = sub.add_parser(
        "recognize", help="predict labels (0 = unknown), one per input row"
    )
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(run=_cmd_recognize)

    p = sub.add_parser("eval", help="run the open-world protocol and write a report")
    p.add_argument("--data", required=True)
    p.add_argument("--initial", type=int, required=True)
    p.add_argument("--increment", type=int, required=True)
    p.add_argument("--stages", type=int, required=True)
    p.add_argument("--unknown", type=int, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--learning-rate", type=float, default=SgdConfig.learning_rate)
    p.add_argument("--iterations", type=int, default=SgdConfig.iterations)
    p.add_argument("--batch-size", type=int, default=SgdConfig.batch_size)
    p.add_argument("--init-scale", type=float, default=SgdConfig.init_scale)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(run=_cmd_eval)

    p = sub.add_parser(
        "risk-audit", help="run the canned open-space risk audit battery"
    )
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(run=_cmd_risk_audit)

    return parser


def _cmd_gen_synth(args) -> int:
    ds = gen_synthetic(
        args.classes, args.dim, args.per_class, args.separation, args.spread, args.seed
    )
    save_features(ds, args.out)
    return 0


def _cmd_whiten(args) -> int:
    ds = load_features(args.data)
    fit_ds = load_features(args.fit) if args.fit else ds
    save_features(apply_whitening(compute_whitening(fit_ds), ds), args.out)
    return 0


def _sgd_from_args(args) -> SgdConfig:
    return SgdConfig(
        learning_rate=args.learning_rate,
        iterations=args.iterations,
        batch_size=args.batch_size,
        seed=args.seed,
        init_scale=args.init_scale,
    )


def _cmd_train_metric(args) -> int:
    ds = load_features(args.data)
    train_metric(ds, args.m, _sgd_from_args(args)).save(args.out)
    return 0


def _cmd_estimate_tau(args) -> int:
    known = load_features(args.known)
    unknown = load_features(args.unknown)
    metric = MetricModel.load(args.metric)
    if args.grid is not None:
        try:
            grid = tuple(float(v) for v in args.grid.split(","))
        except ValueError:
            raise OwrError(f"malformed tau grid {args.grid!r}")
    else:
        grid = tuple(float(t) for t in default_tau_grid(known, metric))
    tau = estimate_tau(known, unknown, metric, TauSearchConfig(grid, args.folds, args.seed))
    print(repr(tau))
    if args.out:
        NnoModel(NcmModel.from_dataset(metric, known), tau).save(args.out)
    return 0


def _cmd_add_classes(args) -> int:
    from .nno import increment_learn

    model = NnoModel.load(args.model)
    ds = load_features(args.data)
    for c in ds.class_ids():
        model = increment_learn(model, ds.subset(ds.labels == c))
    model.save(args.out)
    return 0


def _cmd_recognize(args) -> int:
    model = NnoModel.load(args.model)
    ds = load_features(args.data)
    for x in ds.features:
        print(recognize(model, x))
    return 0


def _cmd_eval(args) -> int:
    ds = load_features(args.data)
    cfg = ProtocolConfig(
        initial_known=args.initial,
        increment_size=args.increment,
        stage_count=args.stages,
        unknown_count=args.unknown,
        m=args.m,
        sgd=_sgd_from_args(args),
        fold_count=args.folds,
        seed=args.seed,
    )
    report = run_open_world_protocol(ds, cfg)
    emit_report(report, args.out)
    from .plots import render_stage_curves

    render_stage_curves(report, Path(args.out) / "curves.png")
    return 0


def _cmd_risk_audit(args) -> int:
    rows = run_audit_battery(args.samples, args.seed)
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="\n") as fh:
        fh.write("audit_name,dims,n_samples,risk,std_error,seed\n")
        for row in rows:
            fh.write(
                f"{row.name},{row.dims},{row.samples},"
                f"{repr(row.risk)},{repr(row.std_error)},{row.seed}\n"
            )
    from .plots import render_audit_bars

    render_audit_bars(rows, out.with_suffix(".png"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
