"""Open-world recognition over feature vectors.

Nearest-class-mean classification under a learned low-rank metric,
distance-based rejection of unknown categories, incremental registration of
novel classes, an end-to-end evaluation protocol, and Monte Carlo audits of
open-space risk.
"""

from .dataio import (
    LabeledDataset,
    SplitSpec,
    WhitenStats,
    apply_whitening,
    compute_whitening,
    gen_synthetic,
    load_features,
    make_folds,
    save_features,
    split_known_unknown,
    synthetic_class_centers,
)
from .errors import OwrError
from .metric import (
    MetricModel,
    SgdConfig,
    finite_diff_check,
    ncm_loss,
    ncm_loss_grad,
    train_metric,
)
from .ncm import (
    DEFAULT_THETA_GRID,
    NcmModel,
    class_means,
    dist_w,
    predict_closed,
    predict_softmax_threshold,
    softmax_probs,
)
from .nno import (
    NnoModel,
    TauSearchConfig,
    default_tau_grid,
    estimate_softmax_theta,
    estimate_tau,
    f1_at_tau,
    increment_learn,
    inverse_ball_volume,
    nno_score,
    recognize,
)
from .protocol import (
    EvalReport,
    ProtocolConfig,
    StageResult,
    emit_report,
    multiclass_error,
    open_world_error,
    plan_protocol,
    run_open_world_protocol,
    top1_accuracy,
)
from .risk import (
    AuditRow,
    CapModel,
    RiskEstimate,
    RiskProblem,
    audit_combination_threshold,
    audit_transform,
    combine_cap_models,
    cone_model,
    estimate_open_space_risk,
    run_audit_battery,
    sample_uniform_ball,
)

__version__ = "0.1.0"

__all__ = [
    "AuditRow",
    "CapModel",
    "DEFAULT_THETA_GRID",
    "EvalReport",
    "LabeledDataset",
    "MetricModel",
    "NcmModel",
    "NnoModel",
    "OwrError",
    "ProtocolConfig",
    "RiskEstimate",
    "RiskProblem",
    "SgdConfig",
    "SplitSpec",
    "StageResult",
    "TauSearchConfig",
    "WhitenStats",
    "apply_whitening",
    "audit_combination_threshold",
    "audit_transform",
    "class_means",
    "combine_cap_models",
    "compute_whitening",
    "cone_model",
    "default_tau_grid",
    "dist_w",
    "emit_report",
    "estimate_open_space_risk",
    "estimate_softmax_theta",
    "estimate_tau",
    "f1_at_tau",
    "finite_diff_check",
    "gen_synthetic",
    "increment_learn",
    "inverse_ball_volume",
    "load_features",
    "make_folds",
    "multiclass_error",
    "ncm_loss",
    "ncm_loss_grad",
    "nno_score",
    "open_world_error",
    "plan_protocol",
    "predict_closed",
    "predict_softmax_threshold",
    "recognize",
    "run_audit_battery",
    "run_open_world_protocol",
    "sample_uniform_ball",
    "save_features",
    "softmax_probs",
    "split_known_unknown",
    "synthetic_class_centers",
    "top1_accuracy",
    "train_metric",
    "__version__",
]
