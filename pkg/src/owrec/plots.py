"""Figure rendering for evaluation reports and risk audit batteries."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .protocol import EvalReport


def render_stage_curves(report: EvalReport, out_path) -> None:
    """Accuracy and error curves against the number of known classes."""
    x = [s.known_classes for s in report.stages]
    fig, (ax_acc, ax_err) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    series = [
        ("cs_ncm", [s.cs_ncm_top1 for s in report.stages], "o-"),
        ("os_ncm", [s.os_ncm_top1 for s in report.stages], "s-"),
        ("cs_nno", [s.cs_nno_top1 for s in report.stages], "^--"),
        ("os_nno", [s.os_nno_top1 for s in report.stages], "v--"),
        ("os_ncm_sth", [s.os_ncm_sth_top1 for s in report.stages], "x:"),
    ]
    for label, ys, style in series:
        ax_acc.plot(x, ys, style, label=label)
    ax_acc.set_xlabel("known classes")
    ax_acc.set_ylabel("top-1 accuracy")
    ax_acc.set_ylim(-0.02, 1.02)
    ax_acc.legend(fontsize=8)
    ax_acc.grid(alpha=0.3)

    ax_err.plot(x, [s.eps_k for s in report.stages], "o-", label="eps_k")
    ax_err.plot(x, [s.eps_ow for s in report.stages], "s--", label="eps_ow")
    ax_err.set_xlabel("known classes")
    ax_err.set_ylabel("error")
    ax_err.legend(fontsize=8)
    ax_err.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def render_audit_bars(rows, out_path) -> None:
    """Bar chart of estimated risks with standard-error whiskers."""
    names = [row.name for row in rows]
    risks = [row.risk for row in rows]
    errs = [row.std_error for row in rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.9 * len(rows)), 4.0))
    ax.bar(range(len(rows)), risks, yerr=errs, capsize=3, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("open-space risk")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
