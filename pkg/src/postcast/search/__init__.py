from .core import (
    Objective,
    OptimizerConfig,
    SearchTrace,
    TraceRecord,
    evaluate_candidate,
    run,
)

__all__ = [
    "Objective",
    "OptimizerConfig",
    "SearchTrace",
    "TraceRecord",
    "evaluate_candidate",
    "run",
]
