"""
Posterior summaries, run comparisons, density exports and benchmark tables
"""
import logging
import math
import os
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from config import BENCH_MIN_SECONDS, DENSITY_BINS
from errors import BenchmarkError, ComparisonError, ESSUndefinedError, InsufficientDrawsError
from models import ChainOutput, CoefficientSummary, Method, SummaryReport
from samplers import effective_sample_size

logger = logging.getLogger(__name__)

BASELINE_METHOD = Method.PARALLEL_MH.value
MIN_BENCH_REPEAT = 3


def summarize_column(name: str, column: np.ndarray) -> CoefficientSummary:
    column = np.asarray(column, dtype=np.float64)
    if column.size == 0:
        logger.warning("coefficient '%s' has no kept draws; reporting NaN", name)
        nan = float("nan")
        return CoefficientSummary(name=name, mean=nan, sd=nan, q025=nan, q50=nan, q975=nan, ess=nan, mcse=nan)
    sd = float(np.std(column, ddof=1)) if column.size > 1 else float("nan")
    q025, q50, q975 = np.quantile(column, [0.025, 0.5, 0.975])
    try:
        ess = effective_sample_size(column)
        mcse = sd / math.sqrt(ess)
    except (InsufficientDrawsError, ESSUndefinedError) as exc:
        logger.warning("ESS of '%s' not reported: %s", name, exc.detail)
        ess = mcse = float("nan")
    return CoefficientSummary(
        name=name, mean=float(np.mean(column)), sd=sd,
        q025=float(q025), q50=float(q50), q975=float(q975), ess=ess, mcse=mcse,
    )


def summarize(chain: ChainOutput) -> SummaryReport:
    """Per-coefficient moments, quantiles, ESS and MCSE plus run-level rates"""
    return SummaryReport(
        method=chain.method,
        kept_draws=chain.kept_draws,
        coefficients=[summarize_column(name, chain.draws[:, j]) for j, name in enumerate(chain.feature_names)],
        acceptance_rate=chain.acceptance_rate,
        promotion_rate=chain.promotion_rate,
        stage2_acceptance_rate=chain.stage2_acceptance_rate,
        mean_stage2_probability=chain.mean_stage2_probability,
        exact_evals=chain.exact_evals,
        approx_evals=chain.approx_evals,
        iterations_per_second=chain.iterations_per_second,
        wall_seconds=chain.wall_seconds,
    )


def summary_frame(report: SummaryReport) -> pd.DataFrame:
    """Coefficient table with the run-level figures repeated as run_* columns"""
    frame = pd.DataFrame([coefficient.model_dump() for coefficient in report.coefficients])
    run_fields = report.model_dump(exclude={"coefficients"})
    for key, value in run_fields.items():
        frame[f"run_{key}"] = value
    return frame


def density_frame(chains: Dict[str, ChainOutput], bins: int = DENSITY_BINS) -> pd.DataFrame:
    """Binned densities per coefficient and run on bin edges shared across runs"""
    names = _common_names(chains) if len(chains) > 1 else next(iter(chains.values())).feature_names
    rows = []
    for j, name in enumerate(names):
        pooled = np.concatenate([chain.draws[:, j] for chain in chains.values()])
        edges = np.histogram_bin_edges(pooled, bins=bins)
        for label, chain in chains.items():
            counts, _ = np.histogram(chain.draws[:, j], bins=edges)
            density, _ = np.histogram(chain.draws[:, j], bins=edges, density=True)
            for k, count in enumerate(counts):
                rows.append({
                    "coefficient": name,
                    "run": label,
                    "bin_left": edges[k],
                    "bin_right": edges[k + 1],
                    "count": int(count),
                    "density": float(density[k]),
                })
    return pd.DataFrame(rows)


def _common_names(chains: Dict[str, ChainOutput]) -> List[str]:
    labels = list(chains)
    reference = chains[labels[0]].feature_names
    for label in labels[1:]:
        if chains[label].feature_names != reference:
            raise ComparisonError(
                f"run '{label}' has coefficients {chains[label].feature_names}, "
                f"run '{labels[0]}' has {reference}"
            )
    return list(reference)


def compare(chains: Dict[str, ChainOutput]) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Aligned per-coefficient table and pairwise KS / moment comparisons"""
    if len(chains) < 2:
        raise ComparisonError(f"compare needs at least 2 runs, got {len(chains)}")
    names = _common_names(chains)
    summaries = {label: summarize(chain) for label, chain in chains.items()}

    aligned = []
    for j, name in enumerate(names):
        for label, report in summaries.items():
            coefficient = report.coefficients[j]
            aligned.append({"coefficient": name, "run": label, **coefficient.model_dump(exclude={"name"})})

    pairs = []
    for first, second in combinations(chains, 2):
        for j, name in enumerate(names):
            a, b = summaries[first].coefficients[j], summaries[second].coefficients[j]
            result = ks_2samp(chains[first].draws[:, j], chains[second].draws[:, j])
            combined_mcse = math.sqrt(a.mcse**2 + b.mcse**2)
            delta = b.mean - a.mean
            pairs.append({
                "coefficient": name,
                "run_a": first,
                "run_b": second,
                "delta_mean": delta,
                "sd_ratio": b.sd / a.sd if a.sd > 0 else float("nan"),
                "combined_mcse": combined_mcse,
                "within_3_mcse": bool(abs(delta) < 3.0 * combined_mcse) if math.isfinite(combined_mcse) else False,
                "ks_statistic": float(result.statistic),
                "ks_pvalue": float(result.pvalue),
            })
    return pd.DataFrame(aligned), pd.DataFrame(pairs)


def _partitions(chain: ChainOutput) -> int:
    return int(chain.notes.get("partitions", 1))


def bench_table(runs: Sequence[Tuple[str, List[ChainOutput]]], cpu_count: Optional[int] = None) -> pd.DataFrame:
    """Median speeds per run and ratios against the parallel-MH baseline.

    Aggregate speed counts every chain iteration (p chains for consensus);
    per-core speed divides it by the worker count.
    """
    if not runs:
        raise BenchmarkError("nothing to benchmark")
    cpu_count = cpu_count or os.cpu_count() or 1
    rows = []
    for label, repeats in runs:
        if len(repeats) < MIN_BENCH_REPEAT:
            raise BenchmarkError(f"run '{label}' has {len(repeats)} repeats; at least {MIN_BENCH_REPEAT} are needed")
        walls = np.array([chain.wall_seconds for chain in repeats])
        if walls.min() < BENCH_MIN_SECONDS:
            raise BenchmarkError(
                f"run '{label}' finished in {walls.min():.2g}s, below the {BENCH_MIN_SECONDS}s timer floor; "
                "use more iterations"
            )
        first = repeats[0]
        total_iterations = first.iterations * _partitions(first)
        aggregate = float(np.median(total_iterations / walls))
        rows.append({
            "run": label,
            "method": first.method,
            "workers": first.workers,
            "partitions": _partitions(first),
            "iterations": first.iterations,
            "repeats": len(repeats),
            "median_wall_seconds": float(np.median(walls)),
            "aggregate_iterations_per_second": aggregate,
            "per_core_iterations_per_second": aggregate / first.workers,
            "exact_evals_per_iteration": first.exact_evals / total_iterations,
            "cpu_count": cpu_count,
        })
    table = pd.DataFrame(rows)
    baseline = table.index[table["method"] == BASELINE_METHOD]
    base = int(baseline[0]) if len(baseline) else 0
    table["baseline"] = table.index == base
    table["speed_ratio"] = table["per_core_iterations_per_second"] / table.at[base, "per_core_iterations_per_second"]
    table["aggregate_speed_ratio"] = (
        table["aggregate_iterations_per_second"] / table.at[base, "aggregate_iterations_per_second"]
    )
    return table


def sweep_table(runs: Sequence[Tuple[float, ChainOutput]]) -> pd.DataFrame:
    """Two-stage speed and screening quality across subsample fractions"""
    rows = []
    for fraction, chain in runs:
        rows.append({
            "fraction": fraction,
            "a": chain.subsample_meta.get("a"),
            "iterations_per_second": chain.iterations_per_second,
            "promotion_rate": chain.promotion_rate,
            "mean_stage2_probability": chain.mean_stage2_probability,
            "stage2_acceptance_rate": chain.stage2_acceptance_rate,
            "exact_evals_per_iteration": chain.exact_evals / chain.iterations,
        })
    return pd.DataFrame(rows).sort_values("fraction", ignore_index=True)
