"""
Case-control approximate log-likelihood

The minority outcome class is summed exactly; the majority class is estimated
from a without-replacement subsample A scaled by (class size)/a. With successes
as the minority this is

    sum_{y_i=1} {theta_i - log(1+e^theta_i)} + (n0/a) sum_{i in A} -log(1+e^theta_i)

which is unbiased for the exact log-likelihood over the draw of A.
"""
import logging
from typing import Any, Dict, Optional

import numpy as np

from config import BLOCK_ROWS
from errors import ConfigurationError, DegenerateOutcomeError
from model_core import ShardedEvaluator, as_beta, checked_sum, log_prior, logistic_terms
from models import CaseControlIndex, Dataset, PriorSpec, Subsample

logger = logging.getLogger(__name__)


def build_index(dataset: Dataset) -> CaseControlIndex:
    """Partition rows by outcome, preserving row order within each class"""
    success_rows = np.flatnonzero(dataset.y == 1.0)
    failure_rows = np.flatnonzero(dataset.y == 0.0)
    if success_rows.size == 0 or failure_rows.size == 0:
        raise DegenerateOutcomeError(
            f"dataset has {success_rows.size} successes and {failure_rows.size} failures; "
            "the case-control split needs both classes"
        )
    swapped = success_rows.size > failure_rows.size
    if swapped:
        logger.info(
            "successes are the majority (%d of %d); subsampling successes instead of failures",
            success_rows.size, dataset.n_rows,
        )
    return CaseControlIndex(success_rows=success_rows, failure_rows=failure_rows, swapped=swapped)


def _seed_tag(rng: np.random.Generator) -> str:
    seed_seq = getattr(rng.bit_generator, "seed_seq", None)
    if seed_seq is None or not hasattr(seed_seq, "entropy"):
        return ""
    spawn_key = ".".join(str(k) for k in seed_seq.spawn_key)
    return f"{seed_seq.entropy}:{spawn_key}" if spawn_key else str(seed_seq.entropy)


def resolve_subsample_size(
    index: CaseControlIndex,
    size: Optional[int] = None,
    fraction: Optional[float] = None,
) -> int:
    """Absolute a from either a count or a fraction of the sampled class"""
    if (size is None) == (fraction is None):
        raise ConfigurationError("give exactly one of subsample size or subsample fraction")
    if fraction is not None:
        if not 0 < fraction <= 1:
            raise ConfigurationError(f"subsample fraction {fraction} outside (0, 1]")
        size = max(1, int(round(fraction * index.n_sampled)))
    if not 1 <= size <= index.n_sampled:
        raise ConfigurationError(f"subsample size {size} outside [1, {index.n_sampled}]")
    return int(size)


def draw_subsample(index: CaseControlIndex, a: int, rng: np.random.Generator) -> Subsample:
    """Uniform without-replacement sample of a rows from the sampled class"""
    if not 1 <= a <= index.n_sampled:
        raise ConfigurationError(f"subsample size {a} outside [1, {index.n_sampled}]")
    rows = np.sort(rng.choice(index.sampled_rows, size=a, replace=False))
    return Subsample(rows=rows, population=index.n_sampled, seed_tag=_seed_tag(rng))


class CaseControlLikelihood:
    """Approximate log-likelihood with the design rows it needs gathered once"""

    def __init__(
        self,
        dataset: Dataset,
        index: CaseControlIndex,
        subsample: Subsample,
        workers: int = 1,
        block_rows: int = BLOCK_ROWS,
    ):
        self.dataset = dataset
        self.index = index
        self.feature_names = list(dataset.feature_names)
        self.block_rows = block_rows
        self.evaluator = ShardedEvaluator(workers)
        self._exact_rows = index.exact_rows
        self._X_exact = dataset.X[self._exact_rows]
        self._y_exact = dataset.y[self._exact_rows]
        self._sampled_rows = index.sampled_rows
        self._X_sampled = dataset.X[self._sampled_rows]
        self._y_sampled = dataset.y[self._sampled_rows]
        self.refresh(subsample)

    def __enter__(self) -> "CaseControlLikelihood":
        self.evaluator.open()
        return self

    def __exit__(self, *exc: Any) -> None:
        self.evaluator.close()

    def refresh(self, subsample: Subsample) -> None:
        """Swap in a new subsample A"""
        if subsample.population != self.index.n_sampled:
            raise ConfigurationError("subsample was not drawn from this index")
        self.subsample = subsample
        self._X_sub = self.dataset.X[subsample.rows]
        self._y_sub = self.dataset.y[subsample.rows]

    def _partial(self, X: np.ndarray, y: np.ndarray, rows: np.ndarray, beta: np.ndarray) -> float:
        def block_sum(start: int, stop: int) -> float:
            terms = logistic_terms(X[start:stop], y[start:stop], beta)
            return checked_sum(terms, rows=rows[start:stop])

        return self.evaluator.reduce(block_sum, rows.size, self.block_rows)

    def exact_part(self, beta: np.ndarray) -> float:
        return self._partial(self._X_exact, self._y_exact, self._exact_rows, beta)

    def sampled_part(self, beta: np.ndarray) -> float:
        """Unscaled sum over the subsample"""
        return self._partial(self._X_sub, self._y_sub, self.subsample.rows, beta)

    def full_part(self, beta: np.ndarray) -> float:
        """Exact sum over the whole sampled class.

        exact_part + full_part is the exact log-likelihood, reduced over the
        same blocks as the estimator, so a subsample covering the whole class
        reproduces it bitwise.
        """
        return self._partial(self._X_sampled, self._y_sampled, self._sampled_rows, beta)

    def __call__(self, beta: np.ndarray) -> float:
        beta = as_beta(beta, self.dataset.n_features)
        return self.exact_part(beta) + self.subsample.scale * self.sampled_part(beta)

    def metadata(self) -> Dict[str, Any]:
        return {
            "a": self.subsample.a,
            "population": self.subsample.population,
            "scale": self.subsample.scale,
            "sampled_class": 1 if self.index.swapped else 0,
            "swapped": self.index.swapped,
            "seed_tag": self.subsample.seed_tag,
        }


def approx_log_likelihood(
    beta: np.ndarray,
    dataset: Dataset,
    index: CaseControlIndex,
    sub: Subsample,
) -> float:
    with CaseControlLikelihood(dataset, index, sub) as likelihood:
        return likelihood(beta)


def approx_log_posterior(
    beta: np.ndarray,
    dataset: Dataset,
    index: CaseControlIndex,
    sub: Subsample,
    prior: PriorSpec,
) -> float:
    return approx_log_likelihood(beta, dataset, index, sub) + log_prior(beta, prior)
