"""Post-training correction of time series forecasts.

Fit a correction on held-out validation data, apply it to any model's
predictions: closed-form affine calibration plus a searchable catalog of
parameterized transformations, with optional human steering.
"""

from .actions import (
    ActionInstance,
    ActionKind,
    ActionSpace,
    AffineTail,
    CorrectionPlan,
    ParamRange,
    apply_action,
    apply_plan,
    sample_instance,
)
from .affine import AffineCorrector, AffineFit, apply_affine, fit_affine, risk_gap
from .batch import (
    EvalReport,
    ForecastBatch,
    SplitSpec,
    mse,
    per_channel_report,
    relative_improvement,
)
from .estimator import ForecastCorrector
from .search import Objective, OptimizerConfig, SearchTrace, evaluate_candidate, run

__version__ = "0.1.0"

__all__ = [
    "ActionInstance",
    "ActionKind",
    "ActionSpace",
    "AffineCorrector",
    "AffineFit",
    "AffineTail",
    "CorrectionPlan",
    "EvalReport",
    "ForecastBatch",
    "ForecastCorrector",
    "Objective",
    "OptimizerConfig",
    "ParamRange",
    "SearchTrace",
    "SplitSpec",
    "apply_action",
    "apply_affine",
    "apply_plan",
    "evaluate_candidate",
    "fit_affine",
    "mse",
    "per_channel_report",
    "relative_improvement",
    "risk_gap",
    "run",
    "sample_instance",
]
