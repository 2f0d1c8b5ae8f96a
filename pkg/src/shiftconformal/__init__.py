"""Class-conditional conformal prediction sets under covariate shift with
posterior drift.

The central object is a per-class calibrated threshold on estimated posterior
probabilities. Calibration mixes source and labeled target data; target-domain
points carry likelihood-ratio weights, and the correct mixing weights are
elementary symmetric polynomials of those ratios, computed leave-one-out.

Figure rendering lives in shiftconformal.report and is not imported here, so
plain library use never pulls in matplotlib.
"""

from shiftconformal.conformal import (
    SetClassifier,
    WeightMode,
    calibrate,
    compute_weights,
    cp_baseline,
    exact_weight_matrix,
    predict_set,
    wcp_baseline,
    weighted_quantile,
)
from shiftconformal.core import (
    Alpha,
    Dataset,
    Domain,
    LabeledPoint,
    SplitPlan,
    class_index_sets,
    split_dataset,
)
from shiftconformal.datagen import (
    PhiSpec,
    SimulationConfig,
    check_gcspd_at_alpha,
    generate_health_standin,
    semi_synthetic_pipeline,
    simulate_dataset,
)
from shiftconformal.estimators import ModelKind, fit_model
from shiftconformal.evaluation import (
    Method,
    TrialResult,
    aggregate,
    evaluate,
    oracle_thresholds,
    symdiff_estimate,
)
from shiftconformal.experiments import (
    ExperimentConfig,
    ExperimentMode,
    export_csv,
    import_csv,
    load_config,
    run_experiment,
)
from shiftconformal.ratios import (
    RatioFunction,
    RatioKind,
    constant_ratio,
    delta_w_diagnostic,
    estimated_ratio_from_split,
    fit_estimated_ratio,
    oracle_ratio_simulation,
)

__version__ = "0.1.0"

__all__ = [
    "Alpha",
    "Dataset",
    "Domain",
    "LabeledPoint",
    "SplitPlan",
    "class_index_sets",
    "split_dataset",
    "SetClassifier",
    "WeightMode",
    "calibrate",
    "compute_weights",
    "cp_baseline",
    "exact_weight_matrix",
    "predict_set",
    "wcp_baseline",
    "weighted_quantile",
    "PhiSpec",
    "SimulationConfig",
    "check_gcspd_at_alpha",
    "generate_health_standin",
    "semi_synthetic_pipeline",
    "simulate_dataset",
    "ModelKind",
    "fit_model",
    "Method",
    "TrialResult",
    "aggregate",
    "evaluate",
    "oracle_thresholds",
    "symdiff_estimate",
    "ExperimentConfig",
    "ExperimentMode",
    "export_csv",
    "import_csv",
    "load_config",
    "run_experiment",
    "RatioFunction",
    "RatioKind",
    "constant_ratio",
    "delta_w_diagnostic",
    "estimated_ratio_from_split",
    "fit_estimated_ratio",
    "oracle_ratio_simulation",
    "__version__",
]
