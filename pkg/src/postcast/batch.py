"""Core forecast containers and evaluation metrics.

All metrics are computed in float64 regardless of the storage precision of
the inputs, and the mean squared error is averaged uniformly over
samples x horizon x channels so that the relative-improvement metric is
invariant to reshaping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, ValidationError


def as_float_array(values, name: str = "values") -> np.ndarray:
    """Coerce to a float64 array and reject non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_same_shape(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise DimensionError(
            f"prediction shape {pred.shape} != truth shape {truth.shape}"
        )


@dataclass(frozen=True)
class ForecastBatch:
    """Aligned (predictions, truth) pair over samples x horizon x channels.

    Arrays are stored read-only; operations return new batches instead of
    mutating, so batches are safe to share across worker threads.
    """

    predictions: np.ndarray
    truth: np.ndarray
    sample_ids: tuple[str, ...]

    def __post_init__(self):
        pred = as_float_array(self.predictions, "predictions")
        truth = as_float_array(self.truth, "truth")
        _check_same_shape(pred, truth)
        if pred.ndim != 3:
            raise DimensionError(
                f"batch tensors must be (samples, horizon, channels), got ndim={pred.ndim}"
            )
        n, h, d = pred.shape
        if min(n, h, d) < 1:
            raise ValidationError("batch dimensions must all be >= 1")
        ids = tuple(str(s) for s in self.sample_ids)
        if len(ids) != n:
            raise ValidationError(f"{len(ids)} sample_ids for {n} samples")
        if len(set(ids)) != len(ids):
            raise ValidationError("sample_ids must be unique")
        pred = pred.copy()
        truth = truth.copy()
        pred.flags.writeable = False
        truth.flags.writeable = False
        object.__setattr__(self, "predictions", pred)
        object.__setattr__(self, "truth", truth)
        object.__setattr__(self, "sample_ids", ids)

    @property
    def n_samples(self) -> int:
        return self.predictions.shape[0]

    @property
    def horizon(self) -> int:
        return self.predictions.shape[1]

    @property
    def n_channels(self) -> int:
        return self.predictions.shape[2]

    def with_predictions(self, predictions: np.ndarray) -> "ForecastBatch":
        """Same truth and ids, new predictions."""
        return ForecastBatch(predictions, self.truth, self.sample_ids)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological train/val/test fractions; must sum to 1."""

    train_fraction: float = 0.6
    val_fraction: float = 0.2
    test_fraction: float = 0.2

    def __post_init__(self):
        for name, f in (
            ("train_fraction", self.train_fraction),
            ("val_fraction", self.val_fraction),
            ("test_fraction", self.test_fraction),
        ):
            if not 0.0 < f < 1.0:
                raise ValidationError(f"{name}={f} must be in (0, 1)")
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"split fractions sum to {total}, expected 1")


@dataclass(frozen=True)
class ChannelReport:
    channel: int
    mse_before: float
    mse_after: float
    improvement: float | None


@dataclass(frozen=True)
class EvalReport:
    """Before/after error accounting for one correction."""

    mse_before: float
    mse_after: float
    improvement: float | None
    per_channel: tuple[ChannelReport, ...] = field(default_factory=tuple)
    train_consistent: bool | None = None

    def to_dict(self) -> dict:
        return {
            "mse_before": self.mse_before,
            "mse_after": self.mse_after,
            "improvement": self.improvement,
            "per_channel": [
                {
                    "channel": c.channel,
                    "mse_before": c.mse_before,
                    "mse_after": c.mse_after,
                    "improvement": c.improvement,
                }
                for c in self.per_channel
            ],
            "train_consistent": self.train_consistent,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            mse_before=d["mse_before"],
            mse_after=d["mse_after"],
            improvement=d["improvement"],
            per_channel=tuple(
                ChannelReport(
                    channel=c["channel"],
                    mse_before=c["mse_before"],
                    mse_after=c["mse_after"],
                    improvement=c["improvement"],
                )
                for c in d.get("per_channel", ())
            ),
            train_consistent=d.get("train_consistent"),
        )


def mse(pred, truth) -> float:
    """Mean squared error over all elements."""
    p = as_float_array(pred, "pred")
    t = as_float_array(truth, "truth")
    _check_same_shape(p, t)
    return float(np.mean((p - t) ** 2))


def relative_improvement(mse_before: float, mse_after: float) -> float:
    """Scale-free improvement: positive means the error was reduced."""
    if mse_before <= 0:
        raise DomainError(
            f"relative improvement undefined for mse_before={mse_before}"
        )
    return (mse_before - mse_after) / mse_before


def _safe_improvement(before: float, after: float) -> float | None:
    return relative_improvement(before, after) if before > 0 else None


def per_channel_report(before: ForecastBatch, after: ForecastBatch) -> EvalReport:
    """Global and per-channel error accounting for a corrected batch.

    Both batches must carry the same truth; `train_consistent` is left unset
    here because consistency is an optimizer-level verdict.
    """
    if before.predictions.shape != after.predictions.shape:
        raise DimensionError("before/after batches differ in shape")
    if not np.array_equal(before.truth, after.truth):
        raise ValidationError("before/after batches must share the same truth")

    truth = before.truth
    se_before = (before.predictions - truth) ** 2
    se_after = (after.predictions - truth) ** 2

    global_before = float(np.mean(se_before))
    global_after = float(np.mean(se_after))

    rows = []
    for ch in range(before.n_channels):
        b = float(np.mean(se_before[:, :, ch]))
        a = float(np.mean(se_after[:, :, ch]))
        rows.append(ChannelReport(ch, b, a, _safe_improvement(b, a)))

    return EvalReport(
        mse_before=global_before,
        mse_after=global_after,
        improvement=_safe_improvement(global_before, global_after),
        per_channel=tuple(rows),
        train_consistent=None,
    )


def per_horizon_mse(batch: ForecastBatch) -> np.ndarray:
    """MSE profile along the horizon axis (length H).

    The global MSE equals the uniform mean of this profile; per-horizon
    weighting conventions vary across publications, so both views are exposed.
    """
    return np.mean((batch.predictions - batch.truth) ** 2, axis=(0, 2))
