"""Catalog of parameterized post-training transformations.

Every action maps a prediction tensor to a same-shape tensor. Per-series
statistics (min, max, mean, quantiles) are always computed per sample and
per channel over the horizon axis, never pooled across samples.

Conventions baked in here:
  - the trend time index t runs 1..H (a 0-based index would leave the first
    point of a slope adjustment unchanged);
  - quantiles use sorted-order linear interpolation;
  - "high" scaling applies strictly above the quantile, "low" at or below it;
  - series shifts replicate edge values instead of zero-filling;
  - parameter bounds are validated inclusively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import PlanStepError, ValidationError


class ActionKind(str, Enum):
    LINEAR_TREND_SLOPE = "LinearTrendSlope"
    LINEAR_TREND_INTERCEPT = "LinearTrendIntercept"
    PIECEWISE_SCALE_HIGH = "PiecewiseScaleHigh"
    PIECEWISE_SCALE_LOW = "PiecewiseScaleLow"
    SWAP_SERIES = "SwapSeries"
    SHIFT_SERIES = "ShiftSeries"
    SCALE_AMPLITUDE = "ScaleAmplitude"
    ADD_NOISE = "AddNoise"
    INCREASE_MINIMUM_FACTOR = "IncreaseMinimumFactor"


KIND_ORDER: tuple[ActionKind, ...] = tuple(ActionKind)


def kind_ordinal(kind: ActionKind) -> int:
    return KIND_ORDER.index(kind)


@dataclass(frozen=True)
class ParamRange:
    """One continuous (or integer) parameter and its admissible interval."""

    name: str
    low: float
    high: float
    integer_valued: bool = False

    def __post_init__(self):
        if not self.low < self.high:
            raise ValidationError(f"{self.name}: low {self.low} >= high {self.high}")

    def contains(self, value: float) -> bool:
        if self.integer_valued and not float(value).is_integer():
            return False
        return self.low <= value <= self.high

    def clamp(self, value: float) -> float:
        v = min(max(value, self.low), self.high)
        return float(round(v)) if self.integer_valued else float(v)

    def sub_range(self, low: float, high: float) -> "ParamRange":
        """Narrow to [low, high]; must stay inside this range."""
        if low > high:
            raise ValidationError(f"{self.name}: empty override [{low}, {high}]")
        if low < self.low or high > self.high:
            raise ValidationError(
                f"{self.name}: override [{low}, {high}] exceeds catalog "
                f"[{self.low}, {self.high}]"
            )
        if low == high:
            # degenerate interval: keep a representable pinned range
            eps = 1e-9
            return ParamRange(self.name, low, high + eps, self.integer_valued)
        return ParamRange(self.name, low, high, self.integer_valued)


# Catalog parameter ranges. ScaleAmplitude is widened to (-10, 10): the
# acceptance fixtures require single-step recovery of biases up to ~8%.
CATALOG: dict[ActionKind, tuple[ParamRange, ...]] = {
    ActionKind.LINEAR_TREND_SLOPE: (ParamRange("slope", -5.0, 5.0),),
    ActionKind.LINEAR_TREND_INTERCEPT: (ParamRange("intercept", -5.0, 5.0),),
    ActionKind.PIECEWISE_SCALE_HIGH: (
        ParamRange("quantile", 70.0, 100.0),
        ParamRange("factor", -1.0, 10.0),
    ),
    ActionKind.PIECEWISE_SCALE_LOW: (
        ParamRange("quantile", 0.0, 30.0),
        ParamRange("factor", -1.0, 10.0),
    ),
    ActionKind.SWAP_SERIES: (),
    ActionKind.SHIFT_SERIES: (ParamRange("steps", -200.0, 200.0, integer_valued=True),),
    ActionKind.SCALE_AMPLITUDE: (ParamRange("factor", -10.0, 10.0),),
    ActionKind.ADD_NOISE: (ParamRange("std_pct", 10.0, 30.0),),
    ActionKind.INCREASE_MINIMUM_FACTOR: (ParamRange("factor", -1.0, 10.0),),
}


def param_names(kind: ActionKind) -> tuple[str, ...]:
    return tuple(r.name for r in CATALOG[kind])


@dataclass(frozen=True)
class ActionInstance:
    """One action kind with bound parameter values, the search-space atom."""

    kind: ActionKind
    params: tuple[float, ...] = ()

    def __post_init__(self):
        ranges = CATALOG[self.kind]
        values = tuple(float(v) for v in self.params)
        if len(values) != len(ranges):
            raise ValidationError(
                f"{self.kind.value} takes {len(ranges)} parameters, got {len(values)}"
            )
        for r, v in zip(ranges, values):
            if not r.contains(v):
                raise ValidationError(
                    f"{self.kind.value}.{r.name}={v} outside [{r.low}, {r.high}]"
                )
        object.__setattr__(self, "params", values)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "params": dict(zip(param_names(self.kind), self.params)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionInstance":
        try:
            kind = ActionKind(d["kind"])
        except (KeyError, ValueError):
            raise ValidationError(f"unknown action kind: {d.get('kind')!r}")
        given = d.get("params", {})
        names = param_names(kind)
        unknown = set(given) - set(names)
        if unknown:
            raise ValidationError(f"{kind.value}: unknown parameters {sorted(unknown)}")
        try:
            values = tuple(float(given[n]) for n in names)
        except KeyError as e:
            raise ValidationError(f"{kind.value}: missing parameter {e.args[0]}")
        return cls(kind, values)

    def label(self) -> str:
        if not self.params:
            return self.kind.value
        parts = ", ".join(
            f"{n}={v:g}" for n, v in zip(param_names(self.kind), self.params)
        )
        return f"{self.kind.value}({parts})"


@dataclass(frozen=True)
class AffineTail:
    """Fitted a*x + b applied after all plan steps.

    `a` and `b` are scalars for global scope, per-channel vectors for
    "per_channel" and per-step vectors for "per_horizon".
    """

    a: tuple[float, ...] | float
    b: tuple[float, ...] | float
    scope: str = "global"

    def to_dict(self) -> dict:
        def enc(v):
            return list(v) if isinstance(v, tuple) else v

        return {"a": enc(self.a), "b": enc(self.b), "scope": self.scope}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTail":
        def dec(v):
            return tuple(float(x) for x in v) if isinstance(v, (list, tuple)) else float(v)

        return cls(a=dec(d["a"]), b=dec(d["b"]), scope=d.get("scope", "global"))

    def apply(self, pred: np.ndarray) -> np.ndarray:
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if self.scope == "global":
            return a * pred + b
        if self.scope == "per_channel":
            return a.reshape(1, 1, -1) * pred + b.reshape(1, 1, -1)
        if self.scope == "per_horizon":
            return a.reshape(1, -1, 1) * pred + b.reshape(1, -1, 1)
        raise ValidationError(f"unknown affine scope: {self.scope!r}")


@dataclass(frozen=True)
class CorrectionPlan:
    """Ordered action steps, optionally closed by a fitted affine tail."""

    steps: tuple[ActionInstance, ...] = ()
    affine: AffineTail | None = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def is_identity(self) -> bool:
        return not self.steps and self.affine is None

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "affine": self.affine.to_dict() if self.affine else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrectionPlan":
        steps = tuple(ActionInstance.from_dict(s) for s in d.get("steps", []))
        aff = d.get("affine")
        return cls(steps=steps, affine=AffineTail.from_dict(aff) if aff else None)

    def describe(self) -> str:
        if self.is_identity():
            return "identity"
        parts = [s.label() for s in self.steps]
        if self.affine is not None:
            parts.append(f"affine[{self.affine.scope}]")
        return " -> ".join(parts)


def _as_3d(pred: np.ndarray) -> tuple[np.ndarray, bool]:
    arr = np.asarray(pred, dtype=np.float64)
    if arr.ndim == 2:
        return arr[np.newaxis, :, :], True
    if arr.ndim == 3:
        return arr, False
    raise ValidationError(f"expected (H, d) or (n, H, d) tensor, got ndim={arr.ndim}")


def apply_action(
    action: ActionInstance,
    pred: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply one action to a (H, d) series or (n, H, d) batch.

    Output shape always equals input shape. Only AddNoise consumes `rng`;
    it must be passed explicitly so callers own determinism.
    """
    x, squeeze = _as_3d(pred)
    h = x.shape[1]
    kind = action.kind
    p = action.params

    if kind is ActionKind.LINEAR_TREND_SLOPE:
        span = x.max(axis=1, keepdims=True) - x.min(axis=1, keepdims=True)
        t = np.arange(1, h + 1, dtype=np.float64).reshape(1, h, 1)
        y = x + (p[0] / 100.0) * span * t
    elif kind is ActionKind.LINEAR_TREND_INTERCEPT:
        y = x + (p[0] / 100.0) * x.mean(axis=1, keepdims=True)
    elif kind is ActionKind.PIECEWISE_SCALE_HIGH:
        q = np.quantile(x, p[0] / 100.0, axis=1, keepdims=True, method="linear")
        y = np.where(x > q, x * (1.0 + p[1] / 100.0), x)
    elif kind is ActionKind.PIECEWISE_SCALE_LOW:
        q = np.quantile(x, p[0] / 100.0, axis=1, keepdims=True, method="linear")
        y = np.where(x <= q, x * (1.0 + p[1] / 100.0), x)
    elif kind is ActionKind.SWAP_SERIES:
        mean = x.mean(axis=1, keepdims=True)
        y = 2.0 * mean - x
    elif kind is ActionKind.SHIFT_SERIES:
        delta = int(p[0])
        if abs(delta) >= h:
            raise ValidationError(
                f"shift of {delta} steps erases the whole horizon (H={h})"
            )
        idx = np.clip(np.arange(h) + delta, 0, h - 1)
        y = x[:, idx, :]
    elif kind is ActionKind.SCALE_AMPLITUDE:
        y = x * (1.0 + p[0] / 100.0)
    elif kind is ActionKind.ADD_NOISE:
        if rng is None:
            raise ValidationError("AddNoise requires an explicit random generator")
        y = x + rng.standard_normal(x.shape) * (p[0] / 100.0) * np.abs(x)
    elif kind is ActionKind.INCREASE_MINIMUM_FACTOR:
        q = np.quantile(x, 0.10, axis=1, keepdims=True, method="linear")
        y = np.where(x <= q, x * (1.0 + p[0] / 100.0), x)
    else:  # pragma: no cover
        raise ValidationError(f"unhandled action kind {kind}")

    return y[0] if squeeze else y


def derive_seed(run_seed: int, index: int) -> int:
    """Stable per-candidate seed so parallel evaluation stays deterministic."""
    ss = np.random.SeedSequence(entropy=run_seed % 2**63, spawn_key=(index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def apply_plan(plan: CorrectionPlan, pred: np.ndarray, rng_seed: int = 0) -> np.ndarray:
    """Apply plan steps left to right, then the affine tail if present.

    An empty plan returns the input values bitwise-equal. Each step gets an
    independent stream derived from (rng_seed, step index) so plans are pure
    functions of (plan, input, seed).
    """
    x, squeeze = _as_3d(pred)
    y = x
    for i, step in enumerate(plan.steps):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=rng_seed % 2**63, spawn_key=(i,))
        )
        try:
            y = apply_action(step, y, rng=rng)
        except ValidationError as e:
            raise PlanStepError(i, str(e)) from e
    if plan.affine is not None:
        y = plan.affine.apply(y)
    return y[0] if squeeze else y


@dataclass(frozen=True)
class ActionSpace:
    """The searchable set of kinds and, per kind, the sampling ranges.

    Feedback directives narrow this space; overrides can never widen a range
    past the catalog or introduce new kinds.
    """

    ranges: dict[ActionKind, tuple[ParamRange, ...]] = field(
        default_factory=lambda: dict(CATALOG)
    )

    @classmethod
    def full(cls) -> "ActionSpace":
        return cls(dict(CATALOG))

    @property
    def kinds(self) -> tuple[ActionKind, ...]:
        return tuple(k for k in KIND_ORDER if k in self.ranges)

    def ranges_for(self, kind: ActionKind) -> tuple[ParamRange, ...]:
        return self.ranges[kind]

    def restricted(
        self, overrides: dict[ActionKind, dict[str, tuple[float, float]]]
    ) -> "ActionSpace":
        """Keep only the override kinds, narrowing ranges where given."""
        if not overrides:
            return self
        new: dict[ActionKind, tuple[ParamRange, ...]] = {}
        for kind, bounds in overrides.items():
            base = CATALOG[kind]
            unknown = set(bounds) - {r.name for r in base}
            if unknown:
                raise ValidationError(
                    f"{kind.value}: unknown parameters {sorted(unknown)}"
                )
            new[kind] = tuple(
                r.sub_range(*bounds[r.name]) if r.name in bounds else r for r in base
            )
        return ActionSpace(new)

    def is_full(self) -> bool:
        return self.ranges == CATALOG

    def to_dict(self) -> dict:
        return {
            kind.value: {r.name: [r.low, r.high] for r in ranges}
            for kind, ranges in self.ranges.items()
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSpace":
        ranges: dict[ActionKind, tuple[ParamRange, ...]] = {}
        for kind_name, bounds in d.items():
            kind = ActionKind(kind_name)
            ranges[kind] = tuple(
                ParamRange(r.name, *bounds[r.name], integer_valued=r.integer_valued)
                if r.name in bounds
                else r
                for r in CATALOG[kind]
            )
        return cls(ranges)


def shift_bounds(r: ParamRange, horizon: int | None) -> tuple[int, int]:
    """Integer sampling bounds for a shift range, clamped to |steps| < H.

    The catalog interval is open, so the extreme values +-200 are never drawn.
    """
    lo = max(math.ceil(r.low), -199)
    hi = min(math.floor(r.high), 199)
    if horizon is not None:
        lo = max(lo, -(horizon - 1))
        hi = min(hi, horizon - 1)
    if lo > hi:
        lo = hi = 0
    return lo, hi


def sample_instance(
    kind: ActionKind,
    rng: np.random.Generator,
    space: ActionSpace | None = None,
    horizon: int | None = None,
) -> ActionInstance:
    """Draw parameters uniformly from the kind's ranges."""
    ranges = (space or ActionSpace.full()).ranges_for(kind)
    values = []
    for r in ranges:
        if r.integer_valued:
            lo, hi = shift_bounds(r, horizon)
            values.append(float(rng.integers(lo, hi + 1)))
        else:
            values.append(float(rng.uniform(r.low, r.high)))
    return ActionInstance(kind, tuple(values))
