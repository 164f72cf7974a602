import numpy as np
import pytest

from postcast.batch import ForecastBatch
from postcast.search import Objective


def make_batch(pred, truth, prefix="s"):
    pred = np.asarray(pred, dtype=np.float64)
    ids = tuple(f"{prefix}{i}" for i in range(pred.shape[0]))
    return ForecastBatch(pred, truth, ids)


def planted_scale_objective(scale=1.07, n=40, h=12, d=2, seed=0):
    """truth = scale * pred on both splits; the ideal fix is one amplitude step."""
    rng = np.random.default_rng(seed)
    val_pred = rng.normal(1.0, 1.0, (n, h, d))
    train_pred = rng.normal(1.0, 1.0, (n, h, d))
    return Objective(
        val=make_batch(val_pred, scale * val_pred, "v"),
        train=make_batch(train_pred, scale * train_pred, "t"),
        rng_seed=seed,
    )


def val_only_bias_objective(offset=3.0, n=30, h=8, d=1, seed=1):
    """Validation truth carries an offset that train truth contradicts."""
    rng = np.random.default_rng(seed)
    val_pred = rng.normal(0.0, 1.0, (n, h, d))
    train_pred = rng.normal(0.0, 1.0, (n, h, d))
    val_truth = val_pred + offset
    train_truth = train_pred + rng.normal(0.0, 0.05, train_pred.shape)
    return Objective(
        val=make_batch(val_pred, val_truth, "v"),
        train=make_batch(train_pred, train_truth, "t"),
        rng_seed=seed,
    )


@pytest.fixture
def scale_objective():
    return planted_scale_objective()


@pytest.fixture
def conflict_objective():
    return val_only_bias_objective()
