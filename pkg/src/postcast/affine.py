"""Closed-form affine correction a*x + b and its risk accounting.

Moments use the population convention (divide by n): the algebraic
identities relating the before/after risks only hold exactly on finite
samples under that convention. All accumulation happens through numpy's
pairwise summation, which is a fixed reduction tree, so results are
bit-stable for a given input layout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .actions import AffineTail
from .batch import as_float_array, mse
from .errors import DimensionError, ValidationError

AFFINE_SCOPES = ("global", "per_channel", "per_horizon")


@dataclass(frozen=True)
class AffineFit:
    """Optimal scale/shift for one pooled series, plus the moments behind it.

    When the predictor is constant (zero variance) the scale is pinned to 1
    and only the mean shift is applied; `degenerate` marks that case.
    """

    a: float
    b: float
    cov_py: float
    var_p: float
    mean_p: float
    mean_t: float
    degenerate: bool = False


def fit_affine(pred, truth) -> AffineFit:
    """Least-squares optimal (a, b) for a*pred + b against truth.

    Uses population moments; minimizes the mean squared error over the given
    sample (the loss is a convex quadratic, so this is the global minimum).
    """
    p = as_float_array(pred, "pred").ravel()
    t = as_float_array(truth, "truth").ravel()
    if p.shape != t.shape:
        raise DimensionError(f"pred length {p.size} != truth length {t.size}")
    if p.size < 2:
        raise ValidationError("affine fit needs at least 2 points")

    mean_p = float(np.mean(p))
    mean_t = float(np.mean(t))
    dp = p - mean_p
    var_p = float(np.mean(dp * dp))
    cov = float(np.mean(dp * (t - mean_t)))

    if var_p == 0.0:
        return AffineFit(
            a=1.0, b=mean_t - mean_p, cov_py=cov, var_p=var_p,
            mean_p=mean_p, mean_t=mean_t, degenerate=True,
        )
    a = cov / var_p
    return AffineFit(
        a=a, b=mean_t - a * mean_p, cov_py=cov, var_p=var_p,
        mean_p=mean_p, mean_t=mean_t,
    )


def apply_affine(fit: AffineFit, pred) -> np.ndarray:
    """Elementwise a*x + b, shape preserved."""
    return fit.a * np.asarray(pred, dtype=np.float64) + fit.b


def risk_gap(pred, truth) -> tuple[float, float, float]:
    """(mse before, mse after optimal affine correction, before - after).

    Both risks are measured on the same data the fit used, which is exactly
    the setting where the gap is guaranteed non-negative; it decomposes as
    closed_form_gap(fit) + (mean_t - mean_p)^2.
    """
    p = as_float_array(pred, "pred").ravel()
    t = as_float_array(truth, "truth").ravel()
    fit = fit_affine(p, t)
    r_before = mse(p, t)
    r_after = mse(apply_affine(fit, p), t)
    return r_before, r_after, r_before - r_after


def closed_form_gap(fit: AffineFit) -> float:
    """Variance-space identity for the risk gap: (sqrt(Var_p) - Cov/sqrt(Var_p))^2.

    This equals the measured gap exactly when mean(pred) == mean(truth); in
    general the measured gap exceeds it by (mean_t - mean_p)^2, because the
    fitted shift also removes the mean mismatch. Undefined for degenerate
    (zero-variance) fits.
    """
    if fit.degenerate:
        raise ValidationError("gap identity undefined for zero-variance predictor")
    s = np.sqrt(fit.var_p)
    return float((s - fit.cov_py / s) ** 2)


def fit_affine_tail(pred: np.ndarray, truth: np.ndarray, scope: str = "per_channel") -> AffineTail:
    """Fit a plan tail on (n, H, d) tensors at the requested pooling scope.

    global pools everything into one (a, b); per_channel fits one pair per
    channel across samples and horizon; per_horizon one pair per step.
    """
    if scope not in AFFINE_SCOPES:
        raise ValidationError(f"affine scope must be one of {AFFINE_SCOPES}, got {scope!r}")
    p = as_float_array(pred, "pred")
    t = as_float_array(truth, "truth")
    if p.shape != t.shape:
        raise DimensionError(f"pred shape {p.shape} != truth shape {t.shape}")
    if p.ndim != 3:
        raise DimensionError("affine tail fitting expects (n, H, d) tensors")

    if scope == "global":
        f = fit_affine(p, t)
        return AffineTail(a=f.a, b=f.b, scope="global")
    if scope == "per_channel":
        fits = [fit_affine(p[:, :, c], t[:, :, c]) for c in range(p.shape[2])]
    else:
        fits = [fit_affine(p[:, h, :], t[:, h, :]) for h in range(p.shape[1])]
    return AffineTail(
        a=tuple(f.a for f in fits), b=tuple(f.b for f in fits), scope=scope
    )


class AffineCorrector(BaseEstimator, TransformerMixin):
    """Estimator wrapper around the closed-form affine correction.

    Fits on (predictions, truth) and transforms prediction tensors, so it
    drops into sklearn pipelines and parameter search.

    Parameters
    ----------
    scope:
        "global", "per_channel" or "per_horizon" pooling for the fit.
        Inputs must be (n, H, d) tensors for the non-global scopes;
        "global" also accepts flat vectors.
    """

    def __init__(self, scope: str = "per_channel"):
        self.scope = scope

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            self.tail_ = fit_affine_tail(X, np.asarray(y, dtype=np.float64), self.scope)
        else:
            if self.scope != "global":
                raise ValidationError(
                    f"scope {self.scope!r} needs (n, H, d) input, got shape {X.shape}"
                )
            f = fit_affine(X, y)
            self.tail_ = AffineTail(a=f.a, b=f.b, scope="global")
        return self

    def transform(self, X):
        if not hasattr(self, "tail_"):
            raise NotFittedError("AffineCorrector is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if self.tail_.scope == "global":
            return float(self.tail_.a) * X + float(self.tail_.b)
        if X.ndim == 2:
            return self.tail_.apply(X[np.newaxis])[0]
        return self.tail_.apply(X)
