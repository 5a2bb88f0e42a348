"""
Metropolis-Hastings, subsampling MH and two-stage (delayed-acceptance) MH chains

All acceptance arithmetic is done in logs with an explicit min(0, .); a
log-ratio of exactly 0 always accepts. The random-walk proposal is symmetric,
so the q-terms of every acceptance ratio cancel.
"""
import contextlib
import logging
import math
import time
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from config import BLOCK_ROWS, MIN_ESS_DRAWS
from errors import DimensionError, ESSUndefinedError, InitializationError, InsufficientDrawsError, NumericalError
from likelihood_estimator import CaseControlLikelihood, build_index, draw_subsample
from model_core import LikelihoodModel, LogisticLikelihood, Posterior, as_beta, derive_rng, log_prior
from models import ChainConfig, ChainOutput, Dataset, Method, PriorSpec, ProposalKind, ProposalSpec

logger = logging.getLogger(__name__)


def propose(current: np.ndarray, spec: ProposalSpec, rng: np.random.Generator, scale_factor: float = 1.0) -> np.ndarray:
    """current + N(0, scale_factor^2 * scale)"""
    if spec.kind is not ProposalKind.RANDOM_WALK_GAUSSIAN:
        raise NotImplementedError(f"proposal kind {spec.kind} is not symmetric")
    z = rng.standard_normal(current.size)
    return current + scale_factor * (spec.cholesky @ z)


def mh_log_acceptance(log_current: float, log_proposed: float) -> float:
    """log h = min(0, log p(proposed) - log p(current))"""
    if log_proposed == -math.inf:
        return -math.inf
    return min(0.0, log_proposed - log_current)


def two_stage_log_acceptance(
    approx_current: float,
    exact_current: float,
    approx_proposed: float,
    exact_proposed: float,
) -> float:
    """Stage-2 log rho in closed form: min(0, [p*(b_t) + p(b')] - [p*(b') + p(b_t)])"""
    if exact_proposed == -math.inf:
        return -math.inf
    return min(0.0, (approx_current + exact_proposed) - (approx_proposed + exact_current))


def _accept(rng: np.random.Generator, log_alpha: float) -> bool:
    return rng.random() < math.exp(log_alpha)


def _safe_eval(fn: Callable[[np.ndarray], float], beta: np.ndarray) -> float:
    """Log-density or -inf when evaluation breaks down"""
    try:
        value = fn(beta)
    except NumericalError as exc:
        logger.debug("rejecting proposal: %s", exc.detail)
        return -math.inf
    return value if math.isfinite(value) else -math.inf


class _ScaleAdapter:
    """Burn-in-only Robbins-Monro adaptation of the proposal scale factor"""

    def __init__(self, spec: ProposalSpec, burnin: int):
        self.enabled = spec.adapt_burnin and burnin > 0
        self.target = spec.target_acceptance
        self.interval = spec.adapt_interval
        self.burnin = burnin
        self.log_factor = 0.0
        self._accepted = 0
        self._seen = 0
        self._batches = 0

    @property
    def factor(self) -> float:
        return math.exp(self.log_factor)

    def update(self, iteration: int, accepted: bool) -> None:
        if not self.enabled or iteration > self.burnin:
            return
        self._accepted += int(accepted)
        self._seen += 1
        if self._seen == self.interval:
            rate = self._accepted / self._seen
            self.log_factor += (rate - self.target) / math.sqrt(self._batches + 1)
            self._batches += 1
            self._accepted = self._seen = 0


class _Chain:
    """Bookkeeping shared by the three kernels"""

    def __init__(self, method: Method, feature_names: list, proposal: ProposalSpec, config: ChainConfig, stream: int, workers: int):
        dim = len(feature_names)
        if proposal.dim != dim:
            raise DimensionError(f"proposal has dimension {proposal.dim}, model has {dim}")
        self.method = method
        self.feature_names = feature_names
        self.proposal = proposal
        self.config = config
        self.workers = workers
        self.rng = derive_rng(config.seed, "proposal", stream)
        self.adapter = _ScaleAdapter(proposal, config.burnin)
        self.draws = np.empty((config.kept_draws, dim))
        self.kept = 0
        self.counts: Dict[str, Any] = {
            "stage1_proposals": 0,
            "stage1_promotions": 0,
            "stage2_accepts": 0,
            "stage2_probability_sum": 0.0,
            "exact_evals": 0,
            "approx_evals": 0,
        }
        self.current = as_beta(config.init if config.init is not None else np.zeros(dim), dim)
        self.started = time.perf_counter()

    def propose(self) -> np.ndarray:
        self.counts["stage1_proposals"] += 1
        return propose(self.current, self.proposal, self.rng, self.adapter.factor)

    def check_init(self, value: float, what: str) -> None:
        if not math.isfinite(value):
            raise InitializationError(f"{what} is not finite at the initial state {self.current.tolist()}")

    def step_done(self, iteration: int, accepted: bool) -> None:
        self.adapter.update(iteration, accepted)
        if iteration > self.config.burnin and (iteration - self.config.burnin) % self.config.thinning == 0:
            self.draws[self.kept] = self.current
            self.kept += 1

    def output(self, target: str = "exact", subsample_meta: Optional[Dict[str, Any]] = None) -> ChainOutput:
        wall = time.perf_counter() - self.started
        notes = {}
        if self.config.preset_note:
            notes["preset"] = self.config.preset_note
        if target != "exact":
            notes["target"] = "chain targets the approximate posterior p*; no exactness is promised"
        chain = ChainOutput(
            method=self.method.value,
            feature_names=list(self.feature_names),
            draws=self.draws,
            iterations=self.config.iterations,
            burnin=self.config.burnin,
            thinning=self.config.thinning,
            seed=self.config.seed,
            wall_seconds=wall,
            target=target,
            proposal_scale=self.adapter.factor,
            workers=self.workers,
            subsample_meta=subsample_meta or {},
            notes=notes,
            **self.counts,
        )
        logger.info(
            "%s chain done: %d iterations in %.2fs (%.1f it/s), acceptance %.3f, exact evals %d",
            self.method.value, chain.iterations, wall, chain.iterations_per_second,
            chain.acceptance_rate, chain.exact_evals,
        )
        return chain


def _subsample_meta(likelihood: CaseControlLikelihood, refresh: Optional[int], refreshes: int) -> Dict[str, Any]:
    meta = likelihood.metadata()
    meta["refresh"] = "fixed" if refresh is None else f"every {refresh} iterations"
    meta["refreshes"] = refreshes
    if refresh is not None:
        meta["variance_study"] = True
    return meta


def mh_run(
    dataset: Optional[Dataset],
    prior: PriorSpec,
    proposal: ProposalSpec,
    config: ChainConfig,
    workers: int = 1,
    likelihood: Optional[LikelihoodModel] = None,
    stream: int = 0,
    method: Optional[Method] = None,
    block_rows: int = BLOCK_ROWS,
) -> ChainOutput:
    """Random-walk Metropolis chain on the exact posterior"""
    if likelihood is None:
        likelihood = LogisticLikelihood(dataset, workers=workers, block_rows=block_rows)
    method = method or (Method.MH if workers == 1 else Method.PARALLEL_MH)
    posterior = Posterior(likelihood, prior)
    chain = _Chain(method, likelihood.feature_names, proposal, config, stream, workers)

    with contextlib.ExitStack() as stack:
        if hasattr(likelihood, "__enter__"):
            stack.enter_context(likelihood)
        log_current = _safe_eval(posterior.log_density, chain.current)
        chain.counts["exact_evals"] += 1
        chain.check_init(log_current, "log-posterior")

        for iteration in range(1, config.iterations + 1):
            candidate = chain.propose()
            chain.counts["stage1_promotions"] += 1
            log_candidate = _safe_eval(posterior.log_density, candidate)
            chain.counts["exact_evals"] += 1
            accepted = _accept(chain.rng, mh_log_acceptance(log_current, log_candidate))
            if accepted:
                chain.current, log_current = candidate, log_candidate
                chain.counts["stage2_accepts"] += 1
                chain.counts["stage2_probability_sum"] += 1.0
            chain.step_done(iteration, accepted)

    return chain.output()


def subsampling_mh_run(
    dataset: Dataset,
    prior: PriorSpec,
    proposal: ProposalSpec,
    config: ChainConfig,
    a: int,
    refresh: Optional[int] = None,
    workers: int = 1,
    stream: int = 0,
    block_rows: int = BLOCK_ROWS,
) -> ChainOutput:
    """Metropolis chain on the approximate posterior p*; never touches the exact likelihood"""
    index = build_index(dataset)
    subsample_rng = derive_rng(config.seed, "subsample", stream)
    subsample = draw_subsample(index, a, subsample_rng)
    approx = CaseControlLikelihood(dataset, index, subsample, workers=workers, block_rows=block_rows)
    target = Posterior(approx, prior)
    chain = _Chain(Method.SUBSAMPLE, list(dataset.feature_names), proposal, config, stream, workers)
    refreshes = 0

    with approx:
        log_current = _safe_eval(target.log_density, chain.current)
        chain.counts["approx_evals"] += 1
        chain.check_init(log_current, "approximate log-posterior")

        for iteration in range(1, config.iterations + 1):
            candidate = chain.propose()
            chain.counts["stage1_promotions"] += 1
            log_candidate = _safe_eval(target.log_density, candidate)
            chain.counts["approx_evals"] += 1
            accepted = _accept(chain.rng, mh_log_acceptance(log_current, log_candidate))
            if accepted:
                chain.current, log_current = candidate, log_candidate
                chain.counts["stage2_accepts"] += 1
                chain.counts["stage2_probability_sum"] += 1.0
            chain.step_done(iteration, accepted)

            if refresh is not None and iteration % refresh == 0 and iteration < config.iterations:
                approx.refresh(draw_subsample(index, a, subsample_rng))
                refreshes += 1
                log_current = _safe_eval(target.log_density, chain.current)
                chain.counts["approx_evals"] += 1

    return chain.output(target="approximate", subsample_meta=_subsample_meta(approx, refresh, refreshes))


def two_stage_mh_run(
    dataset: Dataset,
    prior: PriorSpec,
    proposal: ProposalSpec,
    config: ChainConfig,
    a: int,
    refresh: Optional[int] = None,
    workers: int = 1,
    stream: int = 0,
    block_rows: int = BLOCK_ROWS,
) -> ChainOutput:
    """Delayed-acceptance chain: screen with p*, correct with the exact posterior.

    A stage-1 rejection leaves the state unchanged without any exact
    evaluation. A promoted proposal is accepted with the closed-form
    rho = min(1, p*(b_t) p(b') / (p*(b') p(b_t))); the Q-kernel integral form
    is never computed. p* and p at the current state are cached.

    The minority-class sum and the log-prior are shared by p* and p, so a
    promotion only adds the full majority-class sum.
    """
    index = build_index(dataset)
    subsample_rng = derive_rng(config.seed, "subsample", stream)
    subsample = draw_subsample(index, a, subsample_rng)
    approx = CaseControlLikelihood(dataset, index, subsample, workers=workers, block_rows=block_rows)
    if prior.dim != dataset.n_features:
        raise DimensionError(f"prior has dimension {prior.dim}, dataset has {dataset.n_features} columns")
    chain = _Chain(Method.TWO_STAGE, list(dataset.feature_names), proposal, config, stream, workers)
    refreshes = 0

    def screen(beta: np.ndarray) -> Tuple[float, Optional[float]]:
        """p*(beta), plus the minority-class and prior terms for reuse"""
        try:
            shared = approx.exact_part(beta) + log_prior(beta, prior)
            value = shared + approx.subsample.scale * approx.sampled_part(beta)
        except NumericalError as exc:
            logger.debug("rejecting proposal at stage 1: %s", exc.detail)
            return -math.inf, None
        return (value, shared) if math.isfinite(value) else (-math.inf, None)

    def correct(beta: np.ndarray, shared: float) -> float:
        return _safe_eval(lambda b: shared + approx.full_part(b), beta)

    with approx:
        approx_current, shared = screen(chain.current)
        chain.counts["approx_evals"] += 1
        chain.check_init(approx_current, "approximate log-posterior")
        exact_current = correct(chain.current, shared)
        chain.counts["exact_evals"] += 1
        chain.check_init(exact_current, "log-posterior")

        for iteration in range(1, config.iterations + 1):
            candidate = chain.propose()
            approx_candidate, shared = screen(candidate)
            chain.counts["approx_evals"] += 1
            accepted = False
            if _accept(chain.rng, mh_log_acceptance(approx_current, approx_candidate)):
                chain.counts["stage1_promotions"] += 1
                exact_candidate = correct(candidate, shared)
                chain.counts["exact_evals"] += 1
                log_rho = two_stage_log_acceptance(approx_current, exact_current, approx_candidate, exact_candidate)
                chain.counts["stage2_probability_sum"] += math.exp(log_rho)
                if _accept(chain.rng, log_rho):
                    accepted = True
                    chain.current = candidate
                    approx_current, exact_current = approx_candidate, exact_candidate
                    chain.counts["stage2_accepts"] += 1
            chain.step_done(iteration, accepted)

            if refresh is not None and iteration % refresh == 0 and iteration < config.iterations:
                approx.refresh(draw_subsample(index, a, subsample_rng))
                refreshes += 1
                approx_current, _ = screen(chain.current)
                chain.counts["approx_evals"] += 1

    return chain.output(subsample_meta=_subsample_meta(approx, refresh, refreshes))


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS by Geyer's initial positive (monotone) sequence estimator"""
    x = np.asarray(draws, dtype=np.float64).ravel()
    n = x.size
    if n < MIN_ESS_DRAWS:
        raise InsufficientDrawsError(f"ESS needs at least {MIN_ESS_DRAWS} draws, got {n}")
    if np.ptp(x) == 0.0:
        raise ESSUndefinedError("ESS is undefined for a constant column")

    centered = x - x.mean()
    size = 1 << int(math.ceil(math.log2(2 * n)))
    spectrum = np.fft.rfft(centered, n=size)
    autocov = np.fft.irfft(spectrum * np.conjugate(spectrum), n=size)[:n] / n
    rho = autocov / autocov[0]

    pairs = n // 2
    gammas = rho[0:2 * pairs:2] + rho[1:2 * pairs:2]
    total, running = 0.0, math.inf
    for gamma in gammas:
        if gamma <= 0.0:
            break
        running = min(running, gamma)
        total += running
    tau = max(-1.0 + 2.0 * total, 1.0 / n)
    return float(min(n, n / tau))
