"""
Logistic log-likelihood, Gaussian log-prior and exact log-posterior

Likelihood sums are reduced over fixed-size row blocks. Block boundaries depend
only on the row count and BLOCK_ROWS, each block is summed by numpy, and the
block partials are combined with math.fsum in ascending block order, so the
result is bitwise identical for any number of shards.
"""
import logging
import math
import zlib
from typing import Any, Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import solve_triangular
from typing_extensions import Protocol

from config import BLOCK_ROWS
from errors import DimensionError, NumericalError
from models import Dataset, LogPosteriorValue, PriorSpec

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

Rows = Union[slice, np.ndarray, Sequence[int], None]


def derive_rng(master_seed: int, role: str, index: int = 0) -> np.random.Generator:
    """Generator seeded by a stable hash of (master seed, role, index)"""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), zlib.crc32(role.encode()), int(index)]))


def as_beta(values: Any, dim: int) -> np.ndarray:
    """Validate a coefficient vector of length dim"""
    beta = np.asarray(values, dtype=np.float64).reshape(-1)
    if beta.size != dim:
        raise DimensionError(f"beta has length {beta.size}, expected {dim}")
    if not np.all(np.isfinite(beta)):
        raise DimensionError("beta contains non-finite entries")
    return beta


def linear_predictor(beta: np.ndarray, dataset: Dataset, rows: Rows = None) -> np.ndarray:
    """theta_i = x_i . beta for the requested rows, in row order"""
    beta = as_beta(beta, dataset.n_features)
    if rows is None:
        return dataset.X @ beta
    if isinstance(rows, slice):
        if (rows.start is not None and rows.start < 0) or (rows.stop is not None and rows.stop > dataset.n_rows):
            raise DimensionError(f"row range {rows} outside [0, {dataset.n_rows})")
        return dataset.X[rows] @ beta
    index = np.asarray(rows, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= dataset.n_rows):
        raise DimensionError(f"row indices outside [0, {dataset.n_rows})")
    return dataset.X[index] @ beta


def softplus(t: Any) -> Any:
    """log(1 + e^t) as max(t, 0) + log1p(e^-|t|)"""
    t = np.asarray(t, dtype=np.float64)
    value = np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))
    return float(value) if value.ndim == 0 else value


def logistic_terms(X: np.ndarray, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Per-row Bernoulli log-probabilities y*theta - log(1 + e^theta)"""
    theta = X @ beta
    return y * theta - softplus(theta)


def block_bounds(n_rows: int, block_rows: int = BLOCK_ROWS) -> List[Tuple[int, int]]:
    return [(start, min(start + block_rows, n_rows)) for start in range(0, n_rows, block_rows)]


def shard_blocks(blocks: List[Tuple[int, int]], shards: int) -> List[List[Tuple[int, int]]]:
    """Split blocks into at most `shards` contiguous groups"""
    shards = max(1, min(shards, len(blocks)))
    edges = np.linspace(0, len(blocks), shards + 1).round().astype(int)
    return [blocks[edges[i]:edges[i + 1]] for i in range(shards)]


def checked_sum(terms: np.ndarray, offset: int = 0, rows: Optional[np.ndarray] = None) -> float:
    """Sum of a block of terms; a non-finite term raises with its row index"""
    total = float(np.sum(terms))
    if not math.isfinite(total):
        bad = np.flatnonzero(~np.isfinite(terms))
        position = int(bad[0]) if bad.size else 0
        row = int(rows[position]) if rows is not None else offset + position
        raise NumericalError(f"non-finite log-likelihood term at row {row}", row=row)
    return total


class ShardedEvaluator:
    """Evaluates block partial sums on a pool of worker threads"""

    def __init__(self, workers: int = 1):
        self.workers = max(1, int(workers))
        self._parallel: Optional[Parallel] = None

    def open(self) -> "ShardedEvaluator":
        if self.workers > 1 and self._parallel is None:
            self._parallel = Parallel(n_jobs=self.workers, prefer="threads")
            self._parallel.__enter__()
        return self

    def close(self) -> None:
        if self._parallel is not None:
            self._parallel.__exit__(None, None, None)
            self._parallel = None

    def __enter__(self) -> "ShardedEvaluator":
        return self.open()

    def __exit__(self, *exc: Any) -> None:
        self.close()

    def reduce(self, block_sum: Callable[[int, int], float], n_rows: int, block_rows: int = BLOCK_ROWS) -> float:
        """Fixed-order reduction of block_sum over [0, n_rows)"""
        blocks = block_bounds(n_rows, block_rows)
        if self.workers == 1 or len(blocks) == 1:
            return math.fsum(block_sum(start, stop) for start, stop in blocks)

        def run_shard(shard: List[Tuple[int, int]]) -> List[float]:
            return [block_sum(start, stop) for start, stop in shard]

        parallel = self._parallel or Parallel(n_jobs=self.workers, prefer="threads")
        partials = parallel(delayed(run_shard)(shard) for shard in shard_blocks(blocks, self.workers))
        return math.fsum(value for shard in partials for value in shard)


def exact_log_likelihood(
    beta: np.ndarray,
    dataset: Dataset,
    shards: int = 1,
    block_rows: int = BLOCK_ROWS,
) -> float:
    """Exact logistic log-likelihood; independent of the shard count"""
    with LogisticLikelihood(dataset, workers=shards, block_rows=block_rows) as likelihood:
        return likelihood(beta)


def log_prior(beta: np.ndarray, prior: PriorSpec) -> float:
    """w * log N(beta; 0, Sigma0) including the normalising constant"""
    beta = as_beta(beta, prior.dim)
    z = solve_triangular(prior.cholesky, beta, lower=True, check_finite=False)
    log_density = -0.5 * float(z @ z) - 0.5 * (prior.dim * LOG_2PI + prior.log_det)
    return prior.weight * log_density


def exact_log_posterior(
    beta: np.ndarray,
    dataset: Dataset,
    prior: PriorSpec,
    shards: int = 1,
) -> LogPosteriorValue:
    with LogisticLikelihood(dataset, workers=shards) as likelihood:
        return Posterior(likelihood, prior).evaluate(beta)


class LikelihoodModel(Protocol):
    feature_names: List[str]

    def __len__(self) -> int: ...

    def __call__(self, beta: np.ndarray) -> float: ...

    def subset(self, rows: np.ndarray) -> "LikelihoodModel": ...


class LogisticLikelihood:
    """Exact logistic likelihood over a dataset, evaluated in sharded blocks"""

    def __init__(self, dataset: Dataset, workers: int = 1, block_rows: int = BLOCK_ROWS):
        self.dataset = dataset
        self.feature_names = list(dataset.feature_names)
        self.block_rows = block_rows
        self.evaluator = ShardedEvaluator(workers)

    def __len__(self) -> int:
        return self.dataset.n_rows

    def __enter__(self) -> "LogisticLikelihood":
        self.evaluator.open()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.evaluator.close()

    def __call__(self, beta: np.ndarray) -> float:
        beta = as_beta(beta, self.dataset.n_features)
        X, y = self.dataset.X, self.dataset.y

        def block_sum(start: int, stop: int) -> float:
            return checked_sum(logistic_terms(X[start:stop], y[start:stop], beta), offset=start)

        return self.evaluator.reduce(block_sum, self.dataset.n_rows, self.block_rows)

    def subset(self, rows: np.ndarray) -> "LogisticLikelihood":
        return LogisticLikelihood(self.dataset.subset(rows), self.evaluator.workers, self.block_rows)


class GaussianTestLikelihood:
    """Linear-Gaussian likelihood y ~ N(X beta, noise_sd^2), conjugate to the prior.

    Stands in for the logistic likelihood where a closed-form posterior is
    needed, e.g. to check consensus weighting.
    """

    def __init__(self, X: np.ndarray, y: np.ndarray, noise_sd: float = 1.0, feature_names: Optional[List[str]] = None):
        self.X = np.asarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.noise_sd = float(noise_sd)
        self.feature_names = feature_names or [f"b{j}" for j in range(self.X.shape[1])]

    def __len__(self) -> int:
        return self.X.shape[0]

    def __call__(self, beta: np.ndarray) -> float:
        beta = as_beta(beta, self.X.shape[1])
        residual = (self.y - self.X @ beta) / self.noise_sd
        return -0.5 * float(residual @ residual) - 0.5 * self.y.size * (LOG_2PI + 2.0 * math.log(self.noise_sd))

    def subset(self, rows: np.ndarray) -> "GaussianTestLikelihood":
        return GaussianTestLikelihood(self.X[rows], self.y[rows], self.noise_sd, self.feature_names)

    def analytic_posterior(self, prior: PriorSpec) -> Tuple[np.ndarray, np.ndarray]:
        """Posterior mean and covariance under prior^weight"""
        precision = prior.weight * np.linalg.inv(prior.covariance) + self.X.T @ self.X / self.noise_sd**2
        covariance = np.linalg.inv(precision)
        mean = covariance @ (self.X.T @ self.y) / self.noise_sd**2
        return mean, covariance


class Posterior:
    """Likelihood plus weighted prior"""

    def __init__(self, likelihood: LikelihoodModel, prior: PriorSpec):
        if prior.dim != len(likelihood.feature_names):
            raise DimensionError(
                f"prior has dimension {prior.dim}, likelihood has {len(likelihood.feature_names)} coefficients"
            )
        self.likelihood = likelihood
        self.prior = prior

    def evaluate(self, beta: np.ndarray) -> LogPosteriorValue:
        log_likelihood = self.likelihood(beta)
        prior_value = log_prior(beta, self.prior)
        return LogPosteriorValue(
            log_likelihood=log_likelihood,
            log_prior=prior_value,
            total=log_likelihood + prior_value,
        )

    def log_density(self, beta: np.ndarray) -> float:
        return self.likelihood(beta) + log_prior(beta, self.prior)
