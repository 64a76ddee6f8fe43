import numpy as np
import pytest

from dpembed.aggregation import (
    Embedding,
    EmbeddingSet,
    centroid,
    normalize,
    release,
    subsample,
)
from dpembed.privacy import PrivacyBudget, calibrate_classical

SIGMA_CLASSICAL_158 = 0.041156719108174005


def unit_set(rng, n, d, labels=None):
    members = tuple(normalize(Embedding(rng.standard_normal(d))) for _ in range(n))
    return EmbeddingSet(members=members, source_labels=labels or ())


class TestEmbedding:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            Embedding(np.array([1.0, np.nan]))

    def test_normalized_flag_is_checked(self):
        with pytest.raises(ValueError):
            Embedding(np.array([1.0, 1.0]), normalized=True)

    def test_set_requires_uniform_dimension(self):
        a = Embedding(np.zeros(3))
        b = Embedding(np.zeros(4))
        with pytest.raises(ValueError):
            EmbeddingSet(members=(a, b))
        with pytest.raises(ValueError):
            EmbeddingSet(members=())

    def test_values_are_immutable(self):
        e = Embedding(np.ones(3))
        with pytest.raises(ValueError):
            e.values[0] = 2.0


class TestNormalize:
    def test_three_four_five(self):
        out = normalize(Embedding(np.array([3.0, 4.0])))
        assert np.array_equal(out.values, np.array([3.0, 4.0]) / 5.0)
        assert out.normalized

    def test_exact_unit_vector_is_bit_identical(self):
        v = np.array([1.0, 0.0, 0.0])
        out = normalize(Embedding(v))
        assert out.values.tobytes() == v.tobytes()

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            v = rng.standard_normal(6) * rng.uniform(0.1, 50)
            once = normalize(Embedding(v))
            twice = normalize(once)
            assert np.allclose(once.values, twice.values, atol=1e-12, rtol=0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError):
            normalize(Embedding(np.zeros(4)))


class TestCentroid:
    def test_antipodal_cancellation(self):
        s = EmbeddingSet(
            members=(
                Embedding(np.array([1.0, 0.0]), normalized=True),
                Embedding(np.array([-1.0, 0.0]), normalized=True),
            )
        )
        assert np.array_equal(centroid(s), np.zeros(2))

    def test_singleton(self):
        e = normalize(Embedding(np.array([0.3, -0.2, 1.4])))
        s = EmbeddingSet(members=(e,))
        assert np.array_equal(centroid(s), e.values)

    def test_permutation_invariant_bit_for_bit(self):
        rng = np.random.default_rng(0)
        members = [normalize(Embedding(rng.standard_normal(5))) for _ in range(9)]
        base = centroid(EmbeddingSet(members=tuple(members)))
        for _ in range(10):
            rng.shuffle(members)
            got = centroid(EmbeddingSet(members=tuple(members)))
            assert got.tobytes() == base.tobytes()


class TestSubsample:
    def test_full_sample_is_whole_set(self):
        rng = np.random.default_rng(1)
        s = unit_set(rng, 7, 3)
        out = subsample(s, 7, seed=42)
        assert sorted(out.source_labels) == sorted(s.source_labels)

    def test_out_of_range_rejected(self):
        rng = np.random.default_rng(1)
        s = unit_set(rng, 5, 3)
        for m in (0, 6):
            with pytest.raises(ValueError):
                subsample(s, m, seed=0)

    def test_deterministic_in_seed(self):
        rng = np.random.default_rng(2)
        s = unit_set(rng, 20, 4)
        a = subsample(s, 6, seed=9)
        b = subsample(s, 6, seed=9)
        assert a.source_labels == b.source_labels
        assert subsample(s, 6, seed=10).source_labels != a.source_labels

    def test_single_draw_frequencies_are_uniform(self):
        # Monte Carlo oracle: each member should appear with frequency 1/n
        # within 3 binomial standard errors over the trial count.
        rng = np.random.default_rng(3)
        n, trials = 5, 100_000
        s = unit_set(rng, n, 2)
        counts = dict.fromkeys(s.source_labels, 0)
        for seed in range(trials):
            counts[subsample(s, 1, seed=seed).source_labels[0]] += 1
        p = 1.0 / n
        bound = 3.0 * np.sqrt(p * (1 - p) / trials)
        for label in counts:
            assert abs(counts[label] / trials - p) <= bound


class TestRelease:
    def test_no_budget_gives_exact_centroid(self):
        rng = np.random.default_rng(4)
        s = unit_set(rng, 12, 6)
        out = release(s, None, None, seed=3)
        assert np.array_equal(out.values, centroid(s))
        assert out.calibration is None

    def test_noise_scale_bounded_by_classical(self):
        rng = np.random.default_rng(5)
        s = unit_set(rng, 158, 4)
        budget = PrivacyBudget(1.0, 1 / 158)
        for method in ("numeric", "classical"):
            out = release(s, budget, None, seed=1, method=method)
            assert out.calibration.sigma <= SIGMA_CLASSICAL_158 + 1e-15

    def test_rejects_unnormalized_members(self):
        bad = EmbeddingSet(members=(Embedding(np.array([0.5, 0.5])),))
        with pytest.raises(ValueError):
            release(bad, PrivacyBudget(1.0, 0.1), None, seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(6)
        s = unit_set(rng, 10, 5)
        budget = PrivacyBudget(1.0, 0.05)
        a = release(s, budget, 4, seed=17)
        b = release(s, budget, 4, seed=17)
        assert a.values.tobytes() == b.values.tobytes()
        assert a.calibration == b.calibration

    def test_mean_and_isotropy_over_seeds(self):
        # unbiasedness: the empirical mean over many releases approaches the
        # clean centroid within 4 sigma / sqrt(draws) per coordinate;
        # isotropy: per-coordinate noise variances agree within 5%.
        rng = np.random.default_rng(7)
        d, draws = 4, 10_000
        s = unit_set(rng, 6, d)
        clean = centroid(s)
        budget = PrivacyBudget(1.0, 0.1)
        sigma = None
        deltas = np.empty((draws, d))
        for seed in range(draws):
            out = release(s, budget, None, seed=seed)
            sigma = out.calibration.sigma
            deltas[seed] = out.values - clean
        assert np.all(np.abs(deltas.mean(axis=0)) <= 4.0 * sigma / np.sqrt(draws))
        variances = deltas.var(axis=0)
        assert variances.max() / variances.min() <= 1.05


class TestSensitivity:
    def test_centroid_sensitivity_bound_brute_force(self):
        # every single-member replacement moves the centroid by at most 2/k,
        # with the antipodal replacement achieving it exactly
        rng = np.random.default_rng(8)
        for _ in range(250):
            k = int(rng.integers(2, 7))
            d = int(rng.integers(2, 9))
            s = unit_set(rng, k, d)
            base = centroid(s)
            for j in range(k):
                replacement = normalize(Embedding(rng.standard_normal(d)))
                swapped = list(s.members)
                swapped[j] = replacement
                moved = centroid(EmbeddingSet(members=tuple(swapped)))
                assert np.linalg.norm(moved - base) <= 2.0 / k + 1e-12
                swapped[j] = Embedding(-s.members[j].values, normalized=True)
                flipped = centroid(EmbeddingSet(members=tuple(swapped)))
                assert abs(np.linalg.norm(flipped - base) - 2.0 / k) <= 1e-12
