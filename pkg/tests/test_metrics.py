from __future__ import annotations

import itertools
import time

import numpy as np
import pytest

from src.config import FrequencyCoeffs, SeverityCoeffs
from src.errors import UndefinedMetricError, UsageError
from src.loss_sim import simulate_losses
from src.metrics import (
    aligned_correlation,
    normalized_gini,
    ordinal_codes,
    ordinal_correlation,
    raw_gini,
    tie_sensitivity,
)

Y = [10, 0, 5]


def test_raw_gini_hand_cases():
    assert raw_gini(Y, [3, 1, 2]) == pytest.approx(2 / 9)
    assert raw_gini(Y, [1, 3, 2]) == pytest.approx(-2 / 9)
    assert raw_gini([4.0], [1.0]) == pytest.approx(0.0)


def test_normalized_gini_hand_cases():
    assert normalized_gini(Y, [3, 1, 2]).normalized == pytest.approx(1.0)
    assert normalized_gini(Y, [1, 3, 2]).normalized == pytest.approx(-1.0)
    assert normalized_gini(Y, [3, 2, 1]).normalized == pytest.approx(0.5)


def test_result_fields():
    result = normalized_gini(Y, [3, 2, 1])
    assert result.raw == pytest.approx(1 / 9)
    assert result.perfect_raw == pytest.approx(2 / 9)
    assert result.n == 3 and result.tie_policy == "index"
    assert set(result.to_dict()) == {"raw", "perfect_raw", "normalized", "n", "tie_policy"}


def test_self_prediction_is_perfect():
    y = np.random.default_rng(0).gamma(2.0, 100.0, 500)
    assert normalized_gini(y, y).normalized == pytest.approx(1.0)


def test_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    y = rng.gamma(1.0, 50.0, 1000)
    y_hat = rng.normal(size=1000)
    base = normalized_gini(y, y_hat).normalized
    assert normalized_gini(y, np.exp(y_hat)).normalized == pytest.approx(base)
    assert normalized_gini(y, 3 * y_hat + 7).normalized == pytest.approx(base)


def test_tie_policies_on_constant_predictions():
    y = [1, 2, 3]
    assert raw_gini(y, [5, 5, 5], "index") == pytest.approx(-1 / 9)
    assert raw_gini(y, [5, 5, 5], "average") == pytest.approx(0.0)
    assert tie_sensitivity(y, [5, 5, 5]) == pytest.approx(1.0)
    assert tie_sensitivity(Y, [3, 1, 2]) == 0.0


def test_gini_errors():
    with pytest.raises(UndefinedMetricError):
        raw_gini([0, 0, 0], [1, 2, 3])
    with pytest.raises(UsageError):
        raw_gini([1, 2], [1, 2, 3])
    with pytest.raises(UsageError):
        raw_gini([1, -2, 3], [1, 2, 3])
    with pytest.raises(UsageError):
        raw_gini([1, 2, 3], [1, 2, 3], tie_policy="random")
    with pytest.raises(UndefinedMetricError):
        normalized_gini([4, 4, 4], [1, 2, 3])


def test_ordinal_codes_accept_labels_and_ints():
    np.testing.assert_array_equal(ordinal_codes(["Good", "fair", "BAD", 1]), [0, 1, 2, 1])
    with pytest.raises(UsageError):
        ordinal_codes(["Good", "Leaky"])


def test_ordinal_correlation_cases():
    assert ordinal_correlation(["Good", "Fair", "Bad"], ["Good", "Fair", "Bad"]) == pytest.approx(1.0)
    a = [0, 1, 2, 0, 2, 1]
    assert ordinal_correlation(a, [2 - v for v in a]) == pytest.approx(-1.0)
    assert ordinal_correlation([0, 0, 1, 2], [0, 1, 1, 2]) == pytest.approx(0.8528, abs=1e-4)
    assert ordinal_correlation([0, 0, 1, 2], [0, 1, 1, 2], "spearman") == pytest.approx(0.8333, abs=1e-4)


def test_ordinal_correlation_errors():
    with pytest.raises(UndefinedMetricError):
        ordinal_correlation([1, 1, 1], [0, 1, 2])
    with pytest.raises(UsageError):
        ordinal_correlation([0, 1], [0, 1, 2])


def test_aligned_correlation_finds_relabeling():
    truth = [0, 1, 2, 0, 1, 2]
    clusters = [2, 0, 1, 2, 0, 1]
    r, perm = aligned_correlation(truth, clusters)
    assert r == pytest.approx(1.0)
    assert perm == (1, 2, 0)
    assert ordinal_correlation(truth, clusters) < 1.0


@pytest.mark.parametrize("kind", ["pearson", "spearman"])
def test_aligned_correlation_matches_exhaustive_search(kind):
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 3, 300)
    clusters = (truth + rng.integers(0, 3, 300)) % 5
    r, perm = aligned_correlation(truth, clusters, kind)
    best = max(ordinal_correlation(truth, np.asarray(p)[clusters], kind) for p in itertools.permutations(range(5)))
    assert r == pytest.approx(best, abs=1e-9)
    assert ordinal_correlation(truth, np.asarray(perm)[clusters], kind) == pytest.approx(r, abs=1e-9)


def test_aligned_correlation_many_clusters_is_fast():
    # 클래스별 순수 군집 10개 (4/3/3), 각 200개
    truth = np.repeat([0, 0, 0, 0, 1, 1, 1, 2, 2, 2], 200)
    clusters = np.repeat([7, 2, 9, 0, 4, 1, 8, 3, 6, 5], 200)
    t0 = time.monotonic()
    r, perm = aligned_correlation(truth, clusters)
    assert time.monotonic() - t0 < 5.0
    assert sorted(perm) == list(range(10))
    assert r > 0.9
    assert ordinal_correlation(truth, np.asarray(perm)[clusters]) == pytest.approx(r, abs=1e-9)


def test_random_permutation_gini_centres_on_zero(default_policies):
    outcomes = simulate_losses(default_policies, FrequencyCoeffs(), SeverityCoeffs(), master_seed=0)
    y = np.array([o.total_loss for o in outcomes])
    rng = np.random.default_rng(0)
    scores = [normalized_gini(y, rng.permutation(y.size)).normalized for _ in range(1000)]
    assert abs(np.mean(scores)) <= 0.02
