import math

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import make_logistic_dataset
from consensus import (
    combine,
    ensemble_output,
    estimate_weight,
    partition,
    partition_subsample_size,
    regularized_covariance,
    run_consensus,
    subsample_fraction,
)
from errors import CombinationError, ConfigurationError, InsufficientDrawsError
from likelihood_estimator import build_index
from model_core import GaussianTestLikelihood
from models import ChainConfig, Dataset, Method, PriorSpec, ProposalSpec
from samplers import effective_sample_size, mh_run, two_stage_mh_run


# Partitioning
def test_single_partition_holds_every_row(small_dataset):
    plan = partition(small_dataset, 1, np.random.default_rng(0))
    assert np.all(plan.assignment == 0)


def test_partitions_are_balanced():
    dataset = make_logistic_dataset(10, [0.0, 1.0], seed=0)
    plan = partition(dataset, 3, np.random.default_rng(1))
    assert sorted(plan.sizes().tolist()) == [3, 3, 4]


def test_too_many_partitions():
    dataset = make_logistic_dataset(3, [0.0, 1.0], seed=0)
    with pytest.raises(ConfigurationError):
        partition(dataset, 4, np.random.default_rng(0))


def test_assignment_is_uniform_across_seeds():
    dataset = make_logistic_dataset(100, [0.0, 1.0], seed=0)
    counts = np.zeros(4)
    row = 17
    for seed in range(1000):
        plan = partition(dataset, 4, np.random.default_rng(seed))
        counts[plan.assignment[row]] += 1
    assert chisquare(counts).pvalue > 0.01


# Weights
def test_identity_covariance_gives_identity_weight():
    # rows +-e_j: mean zero, sample covariance exactly I
    base = np.vstack([np.eye(2), -np.eye(2)]) * math.sqrt(1.5)
    np.testing.assert_allclose(estimate_weight(base), np.eye(2), atol=1e-12)


def test_weight_scales_inversely_with_draw_scale():
    draws = np.random.default_rng(3).standard_normal((500, 3))
    scale = np.array([2.0, 0.5, 3.0])
    expected = estimate_weight(draws) / np.outer(scale, scale)
    np.testing.assert_allclose(estimate_weight(draws * scale), expected, rtol=1e-10)


def test_weight_inverts_the_sample_covariance():
    draws = np.random.default_rng(4).standard_normal((400, 3)) @ np.array([[1.0, 0.2, 0.0], [0.0, 1.0, 0.3], [0.0, 0.0, 2.0]])
    weight = estimate_weight(draws)
    assert np.linalg.norm(weight @ np.cov(draws, rowvar=False) - np.eye(3)) < 1e-8


def test_near_singular_covariance_is_ridged():
    z = np.random.default_rng(5).standard_normal(300)
    draws = np.column_stack([z, z + 1e-9 * np.random.default_rng(6).standard_normal(300)])
    covariance, ridged = regularized_covariance(draws)
    assert ridged
    assert np.all(np.linalg.eigvalsh(covariance) > 0)


def test_too_few_draws_for_a_weight():
    with pytest.raises(InsufficientDrawsError):
        estimate_weight(np.random.default_rng(0).standard_normal((3, 3)))


# Combination
def test_equal_weights_average_the_draws():
    combined = combine([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])], [np.eye(2), np.eye(2)])
    np.testing.assert_allclose(combined, [[0.5, 0.5]])


def test_scalar_weighted_mean():
    combined = combine([np.array([[3.0]]), np.array([[0.0]])], [np.array([[2.0]]), np.array([[1.0]])])
    np.testing.assert_allclose(combined, [[2.0]])


def test_combination_matches_a_per_draw_solve():
    rng = np.random.default_rng(8)
    draws = [rng.standard_normal((25, 3)) for _ in range(4)]
    weights = []
    for _ in range(4):
        a = rng.standard_normal((3, 3))
        weights.append(a @ a.T + 3 * np.eye(3))
    combined = combine(draws, weights)
    total = sum(weights)
    for s in range(25):
        oracle = np.linalg.solve(total, sum(w @ d[s] for w, d in zip(weights, draws)))
        np.testing.assert_allclose(combined[s], oracle, atol=1e-10)


def test_combination_is_affine_equivariant():
    rng = np.random.default_rng(9)
    draws = [rng.standard_normal((10, 2)) for _ in range(3)]
    weights = [np.diag(rng.uniform(0.5, 2.0, size=2)) + 0.1 for _ in range(3)]
    M = np.array([[2.0, 0.5], [-0.3, 1.0]])
    M_inv = np.linalg.inv(M)
    moved = combine([d @ M.T for d in draws], [M_inv.T @ w @ M_inv for w in weights])
    np.testing.assert_allclose(moved, combine(draws, weights) @ M.T, atol=1e-8)


def test_combination_shape_mismatch():
    with pytest.raises(CombinationError):
        combine([np.zeros((5, 2)), np.zeros((4, 2))], [np.eye(2), np.eye(2)])
    with pytest.raises(CombinationError):
        combine([np.zeros((5, 2))], [np.eye(3)])


# Ensembles
def test_single_partition_reproduces_the_chain(small_dataset):
    prior = PriorSpec.isotropic(3)
    proposal = ProposalSpec.isotropic(3, 0.02)
    config = ChainConfig(iterations=1500, burnin=100, thinning=5, seed=33)
    ensemble = run_consensus(small_dataset, prior, proposal, config, 1)
    chain = mh_run(small_dataset.subset(np.arange(small_dataset.n_rows)), prior, proposal, config)
    np.testing.assert_array_equal(ensemble.combined, chain.draws)
    output = ensemble_output(ensemble, Method.CONSENSUS)
    assert output.method == "consensus"
    assert output.stage2_accepts == chain.stage2_accepts
    assert output.exact_evals == chain.exact_evals


def test_single_partition_two_stage_reproduces_the_chain(small_dataset):
    prior = PriorSpec.isotropic(3)
    proposal = ProposalSpec.isotropic(3, 0.02)
    config = ChainConfig(iterations=800, burnin=100, thinning=2, seed=34)
    ensemble = run_consensus(small_dataset, prior, proposal, config, 1, kernel=Method.CONSENSUS_TWO_STAGE, a=30)
    chain = two_stage_mh_run(small_dataset, prior, proposal, config, a=30)
    np.testing.assert_array_equal(ensemble.combined, chain.draws)
    assert ensemble.kernels == ["two-stage(a=30)"]


def test_duplicated_partitions_combine_to_either_chain():
    rng = np.random.default_rng(12)
    X = rng.standard_normal((40, 2))
    y = X @ np.array([0.5, -1.0]) + rng.standard_normal(40)

    class DuplicatedHook(GaussianTestLikelihood):
        """Every partition sees the full data"""

        def subset(self, rows):
            return GaussianTestLikelihood(self.X, self.y, self.noise_sd, self.feature_names)

    hook = DuplicatedHook(np.vstack([X, X]), np.concatenate([y, y]))
    prior = PriorSpec.isotropic(2, 10.0)
    config = ChainConfig(iterations=2000, burnin=200, seed=1)
    ensemble = run_consensus(None, prior, ProposalSpec.isotropic(2, 0.05), config, 2, likelihood=hook, shared_stream=0)
    first, second = (chain.draws for chain in ensemble.per_partition)
    np.testing.assert_array_equal(first, second)
    np.testing.assert_allclose(ensemble.combined, first, rtol=0, atol=1e-12)

    # default streams differ per partition; the combination still follows its formula
    separate = run_consensus(None, prior, ProposalSpec.isotropic(2, 0.05), config, 2, likelihood=hook)
    first, second = (chain.draws for chain in separate.per_partition)
    assert not np.array_equal(first, second)
    np.testing.assert_allclose(separate.combined, combine([first, second], separate.weights), atol=1e-12)


@pytest.mark.parametrize("kernel", [Method.CONSENSUS, Method.CONSENSUS_TWO_STAGE])
def test_consensus_draws_do_not_depend_on_worker_count(kernel):
    dataset = make_logistic_dataset(1000, [-2.0, 0.5, 0.5], seed=3)
    prior = PriorSpec.isotropic(3)
    proposal = ProposalSpec.isotropic(3, 0.01)
    config = ChainConfig(iterations=300, burnin=50, thinning=5, seed=21)
    a = 80 if kernel is Method.CONSENSUS_TWO_STAGE else None
    runs = [
        run_consensus(dataset, prior, proposal, config, 2, kernel=kernel, a=a, workers=workers, block_rows=64)
        for workers in (1, 4, 16)
    ]
    for other in runs[1:]:
        np.testing.assert_array_equal(runs[0].combined, other.combined)
        for serial, sharded in zip(runs[0].per_partition, other.per_partition):
            np.testing.assert_array_equal(serial.draws, sharded.draws)


def test_gaussian_hook_consensus_matches_the_full_posterior():
    rng = np.random.default_rng(2)
    n, l = 2000, 3
    X = rng.standard_normal((n, l))
    # noise-free responses keep the partition posteriors centred together
    y = X @ np.array([1.0, -0.5, 0.25])
    hook = GaussianTestLikelihood(X, y)
    prior = PriorSpec.isotropic(l, 100.0)
    config = ChainConfig(iterations=40_000, burnin=2_000, thinning=2, seed=5)
    ensemble = run_consensus(None, prior, ProposalSpec.isotropic(l, 1e-3), config, 4, likelihood=hook)

    mean, covariance = hook.analytic_posterior(prior)
    combined = ensemble.combined
    for j in range(l):
        column = combined[:, j]
        mcse = column.std(ddof=1) / math.sqrt(effective_sample_size(column))
        assert abs(column.mean() - mean[j]) < 3 * mcse
    relative = np.linalg.norm(np.cov(combined, rowvar=False) - covariance) / np.linalg.norm(covariance)
    assert relative < 0.1


def test_partition_without_both_classes_falls_back_to_mh():
    X = np.column_stack([np.ones(8), np.arange(8.0)])
    y = np.array([1, 0, 0, 0, 0, 0, 0, 0], dtype=np.float64)
    dataset = Dataset(X=X, y=y, feature_names=["intercept", "x1"])
    config = ChainConfig(iterations=300, burnin=50, seed=3)
    ensemble = run_consensus(
        dataset, PriorSpec.isotropic(2), ProposalSpec.isotropic(2, 0.01), config, 2,
        kernel=Method.CONSENSUS_TWO_STAGE, a=2,
    )
    assert sum(kernel.startswith("mh (fallback") for kernel in ensemble.kernels) == 1


def test_partition_subsample_sizes_scale_with_class_size(small_dataset):
    full = build_index(small_dataset)
    rows = np.concatenate([full.exact_rows, full.sampled_rows[: full.n_sampled // 2]])
    half = build_index(small_dataset.subset(rows))
    fraction = subsample_fraction(20, full)
    assert fraction == 20 / full.n_sampled
    assert partition_subsample_size(fraction, half) == round(20 * half.n_sampled / full.n_sampled)
    assert partition_subsample_size(1e-9, half) == 1
    assert partition_subsample_size(1.0, half) == half.n_sampled


def test_partition_subsample_size_follows_the_partition_majority():
    # 60 successes and 40 failures overall, so successes are sampled
    y = np.array([1.0] * 60 + [0.0] * 40)
    X = np.column_stack([np.ones(100), np.linspace(-1.0, 1.0, 100)])
    dataset = Dataset(X=X, y=y, feature_names=["intercept", "x1"])
    full = build_index(dataset)
    assert full.swapped and full.n_sampled == 60
    # a partition with 5 successes and 30 failures samples its failures
    part = build_index(dataset.subset(np.concatenate([np.arange(5), np.arange(60, 90)])))
    assert not part.swapped and part.n_sampled == 30
    assert partition_subsample_size(subsample_fraction(12, full), part) == 6


def test_consensus_two_stage_records_the_partition_fraction(small_dataset):
    config = ChainConfig(iterations=400, burnin=50, seed=8)
    ensemble = run_consensus(
        small_dataset, PriorSpec.isotropic(3), ProposalSpec.isotropic(3, 0.02), config, 2,
        kernel=Method.CONSENSUS_TWO_STAGE, a=30,
    )
    fraction = 30 / build_index(small_dataset).n_sampled
    assert ensemble.subsample_fraction == fraction
    output = ensemble_output(ensemble, Method.CONSENSUS_TWO_STAGE)
    assert output.subsample_meta["partition_fraction"] == fraction
    assert "partition_subsample" in output.notes
    assert ensemble.kernels == [f"two-stage(a={chain.subsample_meta['a']})" for chain in ensemble.per_partition]


@pytest.mark.slow
def test_two_stage_kernel_speeds_up_consensus():
    dataset = make_logistic_dataset(50_000, [-3.0, 0.5, -0.5, 0.25, 1.0], seed=4)
    prior = PriorSpec.isotropic(5)
    proposal = ProposalSpec.isotropic(5, 1e-4)
    config = ChainConfig(iterations=4_000, burnin=1_000, seed=9)
    a = max(1, round(0.01 * build_index(dataset).n_sampled))
    exact = run_consensus(dataset, prior, proposal, config, 4)
    screened = run_consensus(dataset, prior, proposal, config, 4, kernel=Method.CONSENSUS_TWO_STAGE, a=a)
    assert screened.wall_seconds <= exact.wall_seconds
    exact_evals = sum(chain.exact_evals for chain in exact.per_partition)
    assert sum(chain.exact_evals for chain in screened.per_partition) < exact_evals
