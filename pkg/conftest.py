"""
Shared pytest fixtures
"""
import numpy as np
import pytest

from models import Dataset


def make_logistic_dataset(n: int, beta, seed: int = 0) -> Dataset:
    """Intercept plus standard-normal covariates with Bernoulli(logistic) outcomes"""
    beta = np.asarray(beta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, beta.size - 1))])
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-(X @ beta)))).astype(np.float64)
    return Dataset(X=X, y=y, feature_names=["intercept"] + [f"x{j}" for j in range(1, beta.size)])


@pytest.fixture
def small_dataset() -> Dataset:
    return make_logistic_dataset(200, [-1.0, 0.8, -0.5], seed=1)


@pytest.fixture
def tiny_dataset() -> Dataset:
    """n=10 with n1=4 successes and n0=6 failures"""
    rng = np.random.default_rng(7)
    X = np.column_stack([np.ones(10), rng.standard_normal(10)])
    y = np.array([1, 0, 0, 1, 0, 1, 0, 0, 1, 0], dtype=np.float64)
    return Dataset(X=X, y=y, feature_names=["intercept", "x1"])
