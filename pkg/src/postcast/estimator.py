"""sklearn-style facade over the correction search.

ForecastCorrector.fit searches for the best correction plan on a
validation split (guarded by a training split) and transform applies the
fitted plan to any prediction tensor, so the engine composes with sklearn
pipelines, cloning and grid search.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .actions import apply_plan
from .batch import ForecastBatch
from .errors import ConfigError
from .search import Objective, OptimizerConfig, run


def _as_batch(X, y, prefix: str) -> ForecastBatch:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 2:
        X = X[:, :, np.newaxis]
        y = y[:, :, np.newaxis]
    ids = tuple(f"{prefix}{i}" for i in range(X.shape[0]))
    return ForecastBatch(X, y, ids)


class ForecastCorrector(BaseEstimator, TransformerMixin):
    """Search a catalog of corrections that minimize validation MSE.

    Parameters mirror the engine's optimizer configuration; see
    `postcast.search.OptimizerConfig`. fit requires an extra training split
    (`train_X`, `train_y`): candidates that worsen its MSE beyond
    `guard_tol` are never selected, which is the overfitting guard.

    Attributes
    ----------
    plan_ : CorrectionPlan
        The selected correction.
    trace_ : SearchTrace
        Full episode log of the search.
    best_val_mse_ : float
        Validation MSE of the selected plan.
    """

    def __init__(
        self,
        strategy: str = "random",
        budget: int = 200,
        episodes: int | None = None,
        seed: int = 0,
        affine_tail: bool = False,
        affine_scope: str = "per_channel",
        guard_tol: float = 0.01,
        max_steps: int = 3,
        jobs: int = 1,
        strategy_params: dict | None = None,
    ):
        self.strategy = strategy
        self.budget = budget
        self.episodes = episodes
        self.seed = seed
        self.affine_tail = affine_tail
        self.affine_scope = affine_scope
        self.guard_tol = guard_tol
        self.max_steps = max_steps
        self.jobs = jobs
        self.strategy_params = strategy_params

    def _config(self) -> OptimizerConfig:
        return OptimizerConfig(
            strategy=self.strategy,
            budget=self.budget,
            episodes=self.episodes,
            seed=self.seed,
            affine_tail=self.affine_tail,
            affine_scope=self.affine_scope,
            guard_tol=self.guard_tol,
            max_steps=self.max_steps,
            strategy_params=self.strategy_params or {},
            jobs=self.jobs,
        )

    def fit(self, X, y, train_X=None, train_y=None):
        """Search on validation predictions X against truth y.

        train_X/train_y feed the train-consistency guard and must cover
        different samples than (X, y).
        """
        if train_X is None or train_y is None:
            raise ConfigError(
                "ForecastCorrector.fit needs train_X/train_y for the consistency guard"
            )
        obj = Objective(
            val=_as_batch(X, y, "val"),
            train=_as_batch(train_X, train_y, "train"),
            rng_seed=self.seed,
        )
        trace, _ = run(obj, self._config(), test=None)
        self.plan_ = trace.best_plan
        self.trace_ = trace
        self.best_val_mse_ = trace.best_val_mse
        return self

    def transform(self, X):
        if not hasattr(self, "plan_"):
            raise NotFittedError("ForecastCorrector is not fitted")
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 2
        if squeeze:
            X = X[:, :, np.newaxis]
        out = apply_plan(self.plan_, X, rng_seed=self.seed)
        return out[:, :, 0] if squeeze else out

    def predict(self, X):
        """Alias for transform: corrected predictions."""
        return self.transform(X)
