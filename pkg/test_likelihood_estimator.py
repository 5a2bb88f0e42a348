from itertools import combinations

import numpy as np
import pytest
from pydantic import ValidationError

from conftest import make_logistic_dataset
from errors import ConfigurationError, DegenerateOutcomeError
from likelihood_estimator import (
    CaseControlLikelihood,
    approx_log_likelihood,
    approx_log_posterior,
    build_index,
    draw_subsample,
    resolve_subsample_size,
)
from model_core import exact_log_likelihood, log_prior
from models import CaseControlIndex, Dataset, PriorSpec, Subsample


def test_index_splits_by_outcome(tiny_dataset):
    index = build_index(tiny_dataset)
    assert (index.n1, index.n0, index.n) == (4, 6, 10)
    assert not index.swapped
    np.testing.assert_array_equal(index.exact_rows, [0, 3, 5, 8])
    assert index.n_sampled == 6


def test_index_swaps_when_successes_dominate(tiny_dataset):
    flipped = Dataset(X=tiny_dataset.X, y=1.0 - tiny_dataset.y, feature_names=tiny_dataset.feature_names)
    index = build_index(flipped)
    assert index.swapped
    np.testing.assert_array_equal(index.exact_rows, [0, 3, 5, 8])
    assert index.n_sampled == 6


def test_single_class_is_degenerate():
    dataset = Dataset(X=np.ones((4, 1)), y=np.zeros(4), feature_names=["intercept"])
    with pytest.raises(DegenerateOutcomeError):
        build_index(dataset)


def test_estimator_is_unbiased_over_all_subsamples(tiny_dataset):
    index = build_index(tiny_dataset)
    subsamples = [
        Subsample(rows=np.array(rows), population=index.n_sampled)
        for rows in combinations(index.sampled_rows.tolist(), 2)
    ]
    assert len(subsamples) == 15
    rng = np.random.default_rng(11)
    for _ in range(20):
        beta = rng.normal(scale=2.0, size=2)
        average = np.mean([approx_log_likelihood(beta, tiny_dataset, index, sub) for sub in subsamples])
        assert average == pytest.approx(exact_log_likelihood(beta, tiny_dataset), abs=1e-10)


def test_full_subsample_is_exact(small_dataset):
    index = build_index(small_dataset)
    everything = Subsample(rows=index.sampled_rows, population=index.n_sampled)
    beta = np.array([0.3, -0.2, 0.7])
    assert approx_log_likelihood(beta, small_dataset, index, everything) == pytest.approx(
        exact_log_likelihood(beta, small_dataset), abs=1e-10
    )
    with CaseControlLikelihood(small_dataset, index, everything) as likelihood:
        assert likelihood(beta) == likelihood.exact_part(beta) + likelihood.full_part(beta)


def test_approx_posterior_adds_prior(tiny_dataset):
    index = build_index(tiny_dataset)
    sub = draw_subsample(index, 3, np.random.default_rng(0))
    prior = PriorSpec.isotropic(2, variance=5.0)
    beta = np.array([0.1, 0.2])
    expected = approx_log_likelihood(beta, tiny_dataset, index, sub) + log_prior(beta, prior)
    assert approx_log_posterior(beta, tiny_dataset, index, sub, prior) == pytest.approx(expected)


def test_draw_subsample_is_sorted_distinct_and_seeded(small_dataset):
    index = build_index(small_dataset)
    first = draw_subsample(index, 20, np.random.default_rng(5))
    second = draw_subsample(index, 20, np.random.default_rng(5))
    np.testing.assert_array_equal(first.rows, second.rows)
    assert np.all(np.diff(first.rows) > 0)
    assert set(first.rows.tolist()) <= set(index.sampled_rows.tolist())
    assert first.scale == index.n_sampled / 20


def test_subsample_size_bounds(tiny_dataset):
    index = build_index(tiny_dataset)
    with pytest.raises(ConfigurationError):
        draw_subsample(index, 7, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        draw_subsample(index, 0, np.random.default_rng(0))


def test_subsample_size_from_count_or_fraction(tiny_dataset):
    index = build_index(tiny_dataset)
    assert resolve_subsample_size(index, size=4) == 4
    assert resolve_subsample_size(index, fraction=0.5) == 3
    assert resolve_subsample_size(index, fraction=0.01) == 1
    with pytest.raises(ConfigurationError):
        resolve_subsample_size(index, size=2, fraction=0.5)
    with pytest.raises(ConfigurationError):
        resolve_subsample_size(index)


def test_refresh_swaps_the_subsample(small_dataset):
    index = build_index(small_dataset)
    rng = np.random.default_rng(1)
    with CaseControlLikelihood(small_dataset, index, draw_subsample(index, 10, rng)) as likelihood:
        beta = np.array([0.0, 1.0, -1.0])
        before = likelihood(beta)
        likelihood.refresh(draw_subsample(index, 10, rng))
        assert likelihood(beta) != before
        assert likelihood.metadata()["a"] == 10


def test_four_row_split():
    dataset = Dataset(X=np.ones((4, 1)), y=[1.0, 0.0, 1.0, 0.0], feature_names=["intercept"])
    index = build_index(dataset)
    np.testing.assert_array_equal(index.success_rows, [0, 2])
    np.testing.assert_array_equal(index.failure_rows, [1, 3])


def test_whole_class_subsample_is_a_permutation(tiny_dataset):
    index = build_index(tiny_dataset)
    sub = draw_subsample(index, index.n_sampled, np.random.default_rng(3))
    np.testing.assert_array_equal(np.sort(sub.rows), np.sort(index.sampled_rows))


def test_inclusion_probability_is_a_over_class_size(tiny_dataset):
    index = build_index(tiny_dataset)
    rng = np.random.default_rng(21)
    counts = dict.fromkeys(index.sampled_rows.tolist(), 0)
    draws = 10_000
    for _ in range(draws):
        for row in draw_subsample(index, 2, rng).rows.tolist():
            counts[row] += 1
    for count in counts.values():
        assert abs(count / draws - 1 / 3) < 0.02


def test_index_classes_must_partition_the_rows():
    CaseControlIndex(success_rows=[0, 2], failure_rows=[1, 3])
    with pytest.raises(ValidationError, match="disjoint"):
        CaseControlIndex(success_rows=[0, 1], failure_rows=[1, 2])
    with pytest.raises(ValidationError, match="disjoint"):
        CaseControlIndex(success_rows=[0], failure_rows=[2, 3])


def test_class_sums_are_non_positive(small_dataset):
    index = build_index(small_dataset)
    rng = np.random.default_rng(4)
    with CaseControlLikelihood(small_dataset, index, draw_subsample(index, 15, rng)) as likelihood:
        for _ in range(30):
            beta = rng.normal(scale=3.0, size=3)
            assert likelihood.exact_part(beta) <= 0.0
            assert likelihood.full_part(beta) <= 0.0
            assert likelihood.sampled_part(beta) <= 0.0


def test_estimator_variance_shrinks_as_the_subsample_grows():
    dataset = make_logistic_dataset(400, [-1.0, 0.8, -0.5], seed=6)
    index = build_index(dataset)
    m = index.n_sampled
    beta = np.array([0.3, -0.5, 1.0])
    rng = np.random.default_rng(8)
    variances = []
    with CaseControlLikelihood(dataset, index, draw_subsample(index, m, rng)) as likelihood:
        for a in (m // 8, m // 4, m // 2, m):
            estimates = []
            for _ in range(2000):
                likelihood.refresh(draw_subsample(index, a, rng))
                estimates.append(likelihood(beta))
            variances.append(np.var(estimates))
    assert all(later <= earlier for earlier, later in zip(variances, variances[1:]))
    assert variances[-1] == 0.0
    assert variances[0] > 0.0
