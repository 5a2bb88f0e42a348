"""
Consensus Monte Carlo: partitioned chains with down-weighted priors and
inverse-covariance weighted draw combination
"""
import logging
import time
from typing import Any, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from config import BLOCK_ROWS, CONDITION_LIMIT, RIDGE_EPSILON
from errors import CombinationError, ConfigurationError, EnsembleError, InsufficientDrawsError
from likelihood_estimator import build_index
from model_core import LikelihoodModel, derive_rng
from models import (
    CaseControlIndex,
    ChainConfig,
    ChainOutput,
    ConsensusEnsemble,
    Dataset,
    Method,
    PartitionPlan,
    PriorSpec,
    ProposalSpec,
)
from samplers import mh_run, two_stage_mh_run

logger = logging.getLogger(__name__)

Data = Union[Dataset, LikelihoodModel]


def partition(data: Data, p: int, rng: np.random.Generator, seed: int = 0) -> PartitionPlan:
    """Balanced uniform random assignment of rows to p partitions"""
    n = len(data)
    if p < 1 or p > n:
        raise ConfigurationError(f"cannot split {n} rows into {p} partitions")
    assignment = np.empty(n, dtype=np.int64)
    assignment[rng.permutation(n)] = np.arange(n) % p
    plan = PartitionPlan(p=p, assignment=assignment, seed=seed)
    logger.info("partitioned %d rows into %d partitions of sizes %s", n, p, sorted(set(plan.sizes().tolist())))
    return plan


def regularized_covariance(draws: np.ndarray) -> Tuple[np.ndarray, bool]:
    """Sample covariance of the draws, ridged when it is near-singular"""
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 1:
        draws = draws.reshape(-1, 1)
    m, l = draws.shape
    if m <= l:
        raise InsufficientDrawsError(f"weight estimation needs more than {l} draws, got {m}")
    covariance = np.atleast_2d(np.cov(draws, rowvar=False))
    condition = np.linalg.cond(covariance)
    if np.isfinite(condition) and condition <= CONDITION_LIMIT:
        return covariance, False
    ridge = RIDGE_EPSILON * float(np.trace(covariance)) / l
    if ridge <= 0.0:
        raise CombinationError("draw covariance is zero; the chain never moved")
    logger.warning("covariance condition number %.3g exceeds %.3g; adding ridge %.3g", condition, CONDITION_LIMIT, ridge)
    return covariance + ridge * np.eye(l), True


def _spd_inverse(matrix: np.ndarray) -> np.ndarray:
    try:
        factor = cho_factor(matrix, lower=True)
    except LinAlgError:
        raise CombinationError("matrix is not positive definite")
    inverse = cho_solve(factor, np.eye(matrix.shape[0]))
    return 0.5 * (inverse + inverse.T)


def estimate_weight(draws: np.ndarray) -> np.ndarray:
    """W = inverse sample covariance of one partition's kept draws"""
    covariance, _ = regularized_covariance(draws)
    return _spd_inverse(covariance)


def combine(draws: List[np.ndarray], weights: List[np.ndarray]) -> np.ndarray:
    """combined[s] = (sum W_i)^-1 sum W_i beta_i[s], pairing draws by kept index"""
    if not draws or len(draws) != len(weights):
        raise CombinationError(f"{len(draws)} draw matrices for {len(weights)} weights")
    matrices = [np.asarray(d, dtype=np.float64) for d in draws]
    matrices = [d.reshape(-1, 1) if d.ndim == 1 else d for d in matrices]
    if len({d.shape for d in matrices}) != 1:
        raise CombinationError(f"draw matrices differ in shape: {[d.shape for d in matrices]}")
    stacked = np.stack(matrices)
    l = stacked.shape[2]
    W = np.stack([np.atleast_2d(w) for w in weights])
    if W.shape[1:] != (l, l):
        raise CombinationError(f"weights of shape {W.shape[1:]} for {l} coefficients")
    if len(draws) == 1:
        return stacked[0].copy()
    total = W.sum(axis=0)
    weighted = np.einsum("pij,psj->si", W, stacked)
    try:
        factor = cho_factor(total, lower=True)
    except LinAlgError:
        raise CombinationError("sum of weights is not positive definite")
    return cho_solve(factor, weighted.T).T


def subsample_fraction(a: int, full_index: CaseControlIndex) -> float:
    """Share of the full data's sampled class that a subsample of size a covers"""
    return a / full_index.n_sampled


def partition_subsample_size(fraction: float, part_index: CaseControlIndex) -> int:
    """a_i = clip(round(fraction * m_i), 1, m_i), m_i the partition's own sampled class"""
    m_i = part_index.n_sampled
    return int(min(max(round(fraction * m_i), 1), m_i))


def _run_partition(
    partition_id: int,
    dataset: Optional[Dataset],
    likelihood: Optional[LikelihoodModel],
    prior: PriorSpec,
    proposal: ProposalSpec,
    config: ChainConfig,
    kernel: Method,
    a: Optional[int],
    refresh: Optional[int],
    workers: int,
    stream: int,
    block_rows: int = BLOCK_ROWS,
) -> Tuple[str, Any, str]:
    """One partition chain; failures come back as strings so they cross process boundaries"""
    try:
        if kernel is Method.CONSENSUS_TWO_STAGE:
            chain = two_stage_mh_run(
                dataset, prior, proposal, config, a,
                refresh=refresh, workers=workers, stream=stream, block_rows=block_rows,
            )
            return "ok", chain, f"two-stage(a={a})"
        chain = mh_run(
            dataset, prior, proposal, config,
            workers=workers, likelihood=likelihood, stream=stream, method=Method.MH, block_rows=block_rows,
        )
        return "ok", chain, "mh"
    except Exception as exc:
        return "error", f"{type(exc).__name__}: {exc}", kernel.value


def run_consensus(
    dataset: Optional[Dataset],
    prior: PriorSpec,
    proposal: ProposalSpec,
    config: ChainConfig,
    p: int,
    kernel: Method = Method.CONSENSUS,
    a: Optional[int] = None,
    refresh: Optional[int] = None,
    workers: int = 1,
    likelihood: Optional[LikelihoodModel] = None,
    shared_stream: Optional[int] = None,
    block_rows: int = BLOCK_ROWS,
) -> ConsensusEnsemble:
    """Run p partition chains with prior weight w/p and combine their draws.

    kernel is Method.CONSENSUS for exact MH per partition or
    Method.CONSENSUS_TWO_STAGE for two-stage chains with subsample size a
    (scaled per partition). A two-stage partition missing an outcome class
    falls back to exact MH with a warning. Partition i uses derived chain
    stream i, so p=1 reproduces the single-chain run for the same seed;
    shared_stream runs every partition on that one stream instead.
    """
    if kernel not in (Method.CONSENSUS, Method.CONSENSUS_TWO_STAGE):
        raise ConfigurationError(f"'{kernel.value}' is not a consensus kernel")
    if kernel is Method.CONSENSUS_TWO_STAGE and (a is None or dataset is None):
        raise ConfigurationError("consensus-two-stage needs a dataset and a subsample size")
    source = likelihood if likelihood is not None else dataset
    started = time.perf_counter()
    plan = partition(source, p, derive_rng(config.seed, "partition"), seed=config.seed)
    partition_prior = prior.reweighted(prior.weight / p)
    fraction = subsample_fraction(a, build_index(dataset)) if kernel is Method.CONSENSUS_TWO_STAGE else None

    jobs = []
    fallbacks = {}
    for i in range(p):
        rows = plan.rows(i)
        part_likelihood = likelihood.subset(rows) if likelihood is not None else None
        part_data = dataset.subset(rows) if dataset is not None else None
        part_kernel, part_a = kernel, None
        if kernel is Method.CONSENSUS_TWO_STAGE:
            labels = set(np.unique(part_data.y).tolist())
            if labels != {0.0, 1.0}:
                part_kernel = Method.CONSENSUS
                fallbacks[i] = f"mh (fallback: partition has only outcome {int(labels.pop())})"
                logger.warning("partition %d lacks an outcome class; falling back to exact MH", i)
            else:
                part_a = partition_subsample_size(fraction, build_index(part_data))
        jobs.append((i, part_data, part_likelihood, part_kernel, part_a))

    chain_jobs = min(max(1, workers), p)
    shard_workers = max(1, workers // chain_jobs)
    arguments = [
        (
            i, part_data, part_likelihood, partition_prior, proposal, config, part_kernel, part_a, refresh,
            shard_workers, i if shared_stream is None else shared_stream, block_rows,
        )
        for i, part_data, part_likelihood, part_kernel, part_a in jobs
    ]
    if chain_jobs == 1:
        results = [_run_partition(*args) for args in arguments]
    else:
        results = Parallel(n_jobs=chain_jobs)(delayed(_run_partition)(*args) for args in arguments)

    chains: List[ChainOutput] = []
    kernels: List[str] = []
    for i, (status, payload, label) in enumerate(results):
        if status != "ok":
            raise EnsembleError(payload, partition=i)
        chains.append(payload)
        kernels.append(fallbacks.get(i, label))

    weights: List[np.ndarray] = []
    ridged: List[bool] = []
    for i, chain in enumerate(chains):
        try:
            covariance, flagged = regularized_covariance(chain.draws)
            weights.append(_spd_inverse(covariance))
        except (InsufficientDrawsError, CombinationError) as exc:
            raise EnsembleError(exc.detail, partition=i)
        if flagged:
            logger.warning("partition %d weight was ridge-regularised", i)
        ridged.append(flagged)

    combined = combine([chain.draws for chain in chains], weights)
    wall = time.perf_counter() - started
    logger.info("consensus over %d partitions done in %.2fs", p, wall)
    return ConsensusEnsemble(
        plan=plan,
        per_partition=chains,
        weights=weights,
        combined=combined,
        kernels=kernels,
        ridged=ridged,
        wall_seconds=wall,
        subsample_fraction=fraction,
    )


def ensemble_output(ensemble: ConsensusEnsemble, method: Method, workers: int = 1) -> ChainOutput:
    """Combined draws as a ChainOutput; counters are summed over partitions"""
    first = ensemble.per_partition[0]
    counters = {
        name: sum(getattr(chain, name) for chain in ensemble.per_partition)
        for name in (
            "stage1_proposals", "stage1_promotions", "stage2_accepts",
            "stage2_probability_sum", "exact_evals", "approx_evals",
        )
    }
    notes = dict(first.notes)
    notes.update({
        "partitions": str(ensemble.plan.p),
        "kernels": "; ".join(ensemble.kernels),
        "ridged_partitions": ",".join(str(i) for i, flag in enumerate(ensemble.ridged) if flag) or "none",
        "weights": "inverse sample covariance of kept (post-thinning) draws",
    })
    subsample_meta = {}
    sizes = [chain.subsample_meta.get("a") for chain in ensemble.per_partition]
    if any(size is not None for size in sizes):
        subsample_meta["partition_a"] = ",".join("-" if size is None else str(size) for size in sizes)
    if ensemble.subsample_fraction is not None:
        subsample_meta["partition_fraction"] = ensemble.subsample_fraction
        notes["partition_subsample"] = f"a_i = round({ensemble.subsample_fraction:.6g} * sampled class of partition i)"
    return ChainOutput(
        method=method.value,
        feature_names=list(first.feature_names),
        draws=ensemble.combined,
        iterations=first.iterations,
        burnin=first.burnin,
        thinning=first.thinning,
        seed=first.seed,
        wall_seconds=ensemble.wall_seconds,
        proposal_scale=float(np.mean([chain.proposal_scale for chain in ensemble.per_partition])),
        workers=max(1, workers),
        subsample_meta=subsample_meta,
        notes=notes,
        **counters,
    )
