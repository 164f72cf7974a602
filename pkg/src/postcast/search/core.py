"""Search loop shared by all strategies: objective, budget, trace, guard.

A candidate plan is only ever accepted as the running best when it is
train-consistent, so overfitting the validation split is blocked by
construction. The empty plan is always evaluated first, which gives every
strategy the same safety floor: the returned best can never be worse on
validation than the uncorrected forecasts.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from ..actions import (
    ActionInstance,
    ActionSpace,
    CorrectionPlan,
    apply_plan,
    derive_seed,
    kind_ordinal,
)
from ..affine import fit_affine_tail
from ..batch import EvalReport, ForecastBatch, mse, per_channel_report
from ..errors import ConfigError, ValidationError

logger = logging.getLogger("postcast.search")

STRATEGIES = ("random", "sh-hpo", "ppo", "ga")


def _normalize_strategy(name: str) -> str:
    key = name.lower().replace("_", "-")
    if key not in STRATEGIES:
        raise ConfigError(f"unknown strategy {name!r}; expected one of {STRATEGIES}")
    return key


@dataclass(frozen=True)
class Objective:
    """What the search minimizes: validation MSE, guarded by train MSE."""

    val: ForecastBatch
    train: ForecastBatch
    loss: str = "mse"
    rng_seed: int = 0

    def __post_init__(self):
        if self.loss != "mse":
            raise ConfigError(f"unsupported loss {self.loss!r}")
        overlap = set(self.val.sample_ids) & set(self.train.sample_ids)
        if overlap:
            raise ValidationError(
                f"validation and train batches overlap on {len(overlap)} sample_ids"
            )
        if self.val.horizon != self.train.horizon or self.val.n_channels != self.train.n_channels:
            raise ValidationError("validation and train batches disagree on (H, d)")


@dataclass(frozen=True)
class OptimizerConfig:
    strategy: str = "random"
    budget: int = 200
    episodes: int | None = None
    seed: int = 0
    affine_tail: bool = False
    affine_scope: str = "per_channel"
    guard_tol: float = 0.01
    max_steps: int = 3
    space: ActionSpace = field(default_factory=ActionSpace.full)
    strategy_params: dict = field(default_factory=dict)
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "strategy", _normalize_strategy(self.strategy))
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.episodes is not None and self.episodes < 1:
            raise ConfigError(f"episodes must be >= 1, got {self.episodes}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0 <= self.guard_tol:
            raise ConfigError("guard_tol must be non-negative")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "budget": self.budget,
            "episodes": self.episodes,
            "seed": self.seed,
            "affine_tail": self.affine_tail,
            "affine_scope": self.affine_scope,
            "guard_tol": self.guard_tol,
            "max_steps": self.max_steps,
            "strategy_params": dict(self.strategy_params),
            "jobs": self.jobs,
            "space": None if self.space.is_full() else self.space.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {
            k: d[k]
            for k in (
                "strategy", "budget", "episodes", "seed", "affine_tail",
                "affine_scope", "guard_tol", "max_steps", "strategy_params", "jobs",
            )
            if k in d
        }
        space = d.get("space")
        if space:
            known["space"] = ActionSpace.from_dict(space)
        return cls(**known)


@dataclass(frozen=True)
class TraceRecord:
    episode: int
    plan: CorrectionPlan
    val_mse: float
    accepted: bool

    def to_dict(self) -> dict:
        return {
            "episode": self.episode,
            "plan": self.plan.to_dict(),
            "val_mse": self.val_mse,
            "accepted": self.accepted,
        }


@dataclass
class SearchTrace:
    """Append-only episode log plus the final selection."""

    records: list[TraceRecord] = field(default_factory=list)
    best_plan: CorrectionPlan = field(default_factory=CorrectionPlan)
    best_val_mse: float = float("inf")
    baseline_val_mse: float = float("nan")
    n_evaluations: int = 0
    report: EvalReport | None = None

    def jsonl_lines(self) -> list[str]:
        lines = [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        terminal = {
            "terminal": True,
            "best_plan": self.best_plan.to_dict(),
            "best_val_mse": self.best_val_mse,
            "baseline_val_mse": self.baseline_val_mse,
            "evaluations": self.n_evaluations,
            "report": self.report.to_dict() if self.report else None,
        }
        lines.append(json.dumps(terminal, sort_keys=True))
        return lines

    def to_jsonl(self) -> str:
        return "\n".join(self.jsonl_lines()) + "\n"


@dataclass(frozen=True)
class Outcome:
    """Result of evaluating one candidate."""

    plan: CorrectionPlan
    val_mse: float
    train_mse: float
    consistent: bool
    reward: float  # relative improvement over the validation baseline


def _plan_order_key(plan: CorrectionPlan, val_mse: float):
    """Total deterministic order: error, then simplicity, then parameters."""
    return (
        val_mse,
        plan.n_steps,
        tuple(kind_ordinal(s.kind) for s in plan.steps),
        tuple(v for s in plan.steps for v in s.params),
        0 if plan.affine is None else 1,
    )


class Evaluator:
    """Budgeted candidate evaluation with trace recording and best tracking."""

    def __init__(
        self,
        obj: Objective,
        cfg: OptimizerConfig,
        on_record: Callable[[TraceRecord], None] | None = None,
    ):
        self.obj = obj
        self.cfg = cfg
        self.on_record = on_record
        self.n_evaluations = 0
        self._episode = 0
        self.trace = SearchTrace()
        self._best_key = None
        self.best_outcome: Outcome | None = None
        self.val_baseline = mse(obj.val.predictions, obj.val.truth)
        self.train_baseline = mse(obj.train.predictions, obj.train.truth)
        self.trace.baseline_val_mse = self.val_baseline

    @property
    def remaining(self) -> int:
        return self.cfg.budget - (self.n_evaluations - 1)

    @property
    def horizon(self) -> int:
        return self.obj.val.horizon

    def _measure(self, steps: Sequence[ActionInstance], candidate_index: int) -> Outcome:
        """Pure part of an evaluation; safe to run concurrently."""
        plan = CorrectionPlan(steps=tuple(steps))
        seed = derive_seed(self.obj.rng_seed, candidate_index)
        val_pred = apply_plan(plan, self.obj.val.predictions, rng_seed=seed)
        if self.cfg.affine_tail:
            tail = fit_affine_tail(val_pred, self.obj.val.truth, self.cfg.affine_scope)
            plan = replace(plan, affine=tail)
            val_pred = tail.apply(val_pred)
        val_mse = mse(val_pred, self.obj.val.truth)
        train_pred = apply_plan(plan, self.obj.train.predictions, rng_seed=seed)
        train_mse = mse(train_pred, self.obj.train.truth)
        consistent = train_mse <= self.train_baseline * (1.0 + self.cfg.guard_tol)
        if self.val_baseline > 0:
            reward = (self.val_baseline - val_mse) / self.val_baseline
        else:
            reward = 0.0
        return Outcome(plan, val_mse, train_mse, consistent, reward)

    def _record(self, outcome: Outcome) -> None:
        accepted = False
        if outcome.consistent:
            key = _plan_order_key(outcome.plan, outcome.val_mse)
            if self._best_key is None or key < self._best_key:
                self._best_key = key
                self.best_outcome = outcome
                self.trace.best_plan = outcome.plan
                self.trace.best_val_mse = outcome.val_mse
                accepted = True
        record = TraceRecord(self._episode, outcome.plan, outcome.val_mse, accepted)
        self._episode += 1
        self.trace.records.append(record)
        if self.on_record is not None:
            self.on_record(record)

    def evaluate_baseline(self) -> Outcome:
        """Episode 0: the uncorrected forecasts. Does not consume budget."""
        outcome = self._measure((), candidate_index=self.n_evaluations)
        self.n_evaluations += 1
        self._record(outcome)
        return outcome

    def evaluate(self, steps: Sequence[ActionInstance]) -> Outcome:
        if self.remaining <= 0:
            raise RuntimeError("evaluation budget exhausted")
        outcome = self._measure(steps, candidate_index=self.n_evaluations)
        self.n_evaluations += 1
        self._record(outcome)
        return outcome

    def evaluate_many(self, batch: Iterable[Sequence[ActionInstance]]) -> list[Outcome]:
        """Evaluate independent candidates, optionally in parallel.

        Results are recorded in submission order regardless of completion
        order, so traces do not depend on the worker count.
        """
        items = list(batch)
        if len(items) > self.remaining:
            raise RuntimeError("evaluation budget exhausted")
        start = self.n_evaluations
        self.n_evaluations += len(items)
        if self.cfg.jobs > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.cfg.jobs) as pool:
                outcomes = list(
                    pool.map(self._measure, items, range(start, start + len(items)))
                )
        else:
            outcomes = [self._measure(s, start + i) for i, s in enumerate(items)]
        for outcome in outcomes:
            self._record(outcome)
        return outcomes


def evaluate_candidate(
    plan: CorrectionPlan, obj: Objective, guard_tol: float = 0.01
) -> tuple[float, float, bool]:
    """Score one plan: (validation MSE, train MSE, train-consistency verdict).

    A plan is consistent when it does not worsen train MSE by more than the
    guard tolerance, relative to the uncorrected train MSE.
    """
    val_pred = apply_plan(plan, obj.val.predictions, rng_seed=obj.rng_seed)
    train_pred = apply_plan(plan, obj.train.predictions, rng_seed=obj.rng_seed)
    val_mse = mse(val_pred, obj.val.truth)
    train_mse = mse(train_pred, obj.train.truth)
    baseline = mse(obj.train.predictions, obj.train.truth)
    consistent = train_mse <= baseline * (1.0 + guard_tol)
    return val_mse, train_mse, consistent


def _effective_strategy(cfg: OptimizerConfig, n_kinds: int) -> str:
    """Degenerate budgets fall back to random search instead of failing."""
    minima = {"random": 1, "sh-hpo": n_kinds, "ppo": 2, "ga": 2}
    if cfg.budget < minima[cfg.strategy]:
        logger.warning(
            "budget %d below minimum %d for strategy %s; falling back to random",
            cfg.budget, minima[cfg.strategy], cfg.strategy,
        )
        return "random"
    return cfg.strategy


def run(
    obj: Objective,
    cfg: OptimizerConfig,
    test: ForecastBatch | None = None,
    on_record: Callable[[TraceRecord], None] | None = None,
) -> tuple[SearchTrace, EvalReport | None]:
    """Execute one optimization round and score the result.

    The test batch, when given, is touched exactly once: after the search has
    committed to its best plan. Passing ``test=None`` keeps the test split
    sealed (the service does this until the session is finalized).
    """
    from . import strategies

    if test is not None:
        overlap = set(test.sample_ids) & (
            set(obj.val.sample_ids) | set(obj.train.sample_ids)
        )
        if overlap:
            raise ValidationError(
                f"test batch overlaps train/val on {len(overlap)} sample_ids"
            )

    ev = Evaluator(obj, cfg, on_record=on_record)
    ev.evaluate_baseline()
    if cfg.affine_tail and ev.remaining > 0:
        ev.evaluate(())  # affine-only correction as an explicit candidate

    rng = np.random.default_rng(cfg.seed)
    dispatch = {
        "random": strategies.random_search,
        "sh-hpo": strategies.sh_hpo_search,
        "ppo": strategies.ppo_search,
        "ga": strategies.ga_search,
    }
    dispatch[_effective_strategy(cfg, len(cfg.space.kinds))](ev, rng)

    ev.trace.n_evaluations = ev.n_evaluations

    report = None
    if test is not None:
        corrected = apply_plan(ev.trace.best_plan, test.predictions, rng_seed=cfg.seed)
        report = per_channel_report(test, test.with_predictions(corrected))
        consistent = ev.best_outcome.consistent if ev.best_outcome else True
        report = replace(report, train_consistent=consistent)
        ev.trace.report = report
    return ev.trace, report
