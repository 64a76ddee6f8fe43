import math

import numpy as np
import pytest

from dpembed.privacy import (
    NoiseCalibration,
    PrivacyBudget,
    SubsampleConfig,
    amplify_by_subsampling,
    calibrate_classical,
    calibrate_numeric,
    gaussian_privacy_curve,
    invert_amplification,
)

# frozen with 40-digit arithmetic: (2/158)*sqrt(2*ln(1.25*158))/1
SIGMA_CLASSICAL_158 = 0.041156719108174005
# frozen: ln(1 + 0.1*(e - 1))
EPS_AMPLIFIED_01 = 0.15856507874042911


def test_budget_validation():
    with pytest.raises(ValueError):
        PrivacyBudget(epsilon=0.0, delta=0.1)
    with pytest.raises(ValueError):
        PrivacyBudget(epsilon=1.0, delta=0.0)
    with pytest.raises(ValueError):
        PrivacyBudget(epsilon=1.0, delta=1.0)
    with pytest.raises(ValueError):
        NoiseCalibration(sigma=-1.0, sensitivity=1.0, count=1)
    with pytest.raises(ValueError):
        SubsampleConfig(population=5, sample=6)


class TestCalibrateClassical:
    def test_artwork_sized_budget(self):
        cal = calibrate_classical(PrivacyBudget(1.0, 1 / 158), 2.0, 158)
        assert cal.sigma == pytest.approx(SIGMA_CLASSICAL_158, rel=1e-12)

    def test_exact_two(self):
        # delta = 1.25/e^2 makes the square root sqrt(2 * 2) = 2
        cal = calibrate_classical(PrivacyBudget(1.0, 1.25 / math.e**2), 1.0, 1)
        assert cal.sigma == pytest.approx(2.0, rel=1e-12)

    def test_doubling_count_halves_sigma(self):
        budget = PrivacyBudget(0.7, 0.03)
        s1 = calibrate_classical(budget, 2.0, 10).sigma
        s2 = calibrate_classical(budget, 2.0, 20).sigma
        assert s1 == 2.0 * s2

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            calibrate_classical(PrivacyBudget(1.0, 0.1), -1.0, 5)
        with pytest.raises(ValueError):
            calibrate_classical(PrivacyBudget(1.0, 0.1), 1.0, 0)


class TestPrivacyCurve:
    def test_huge_sigma_drives_delta_to_zero(self):
        assert gaussian_privacy_curve(1e6, 1.0, 1.0) < 1e-9
        assert gaussian_privacy_curve(1e9, 1.0, 1.0) <= gaussian_privacy_curve(
            1e6, 1.0, 1.0
        )

    def test_epsilon_zero_collapses_to_central_mass(self):
        for sigma, delta_sens in [(0.5, 1.0), (2.0, 3.0), (10.0, 2.0)]:
            got = gaussian_privacy_curve(sigma, delta_sens, 0.0)
            want = math.erf(delta_sens / (2.0 * sigma) / math.sqrt(2.0))
            assert got == pytest.approx(want, abs=1e-12)

    def test_classical_sigma_satisfies_curve(self):
        cal = calibrate_classical(PrivacyBudget(0.5, 1 / 47), 2.0, 47)
        assert gaussian_privacy_curve(cal.sigma, 2.0 / 47, 0.5) <= 1 / 47

    def test_strictly_decreasing_in_sigma(self):
        # below sigma ~ 0.15 the float64 value saturates at exactly 1.0, so
        # strictness is only observable where the difference is resolvable
        sigmas = np.geomspace(0.25, 50.0, 40)
        vals = [gaussian_privacy_curve(s, 1.0, 0.3) for s in sigmas]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_classical_never_violates_curve_for_small_epsilon(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            eps = rng.uniform(1e-3, 1.0)
            delta = 10.0 ** rng.uniform(-8, -0.5)
            cal = calibrate_classical(PrivacyBudget(eps, delta), 1.0, 1)
            assert gaussian_privacy_curve(cal.sigma, 1.0, eps) <= delta


class TestCalibrateNumeric:
    def test_bisection_postcondition(self):
        for eps, delta in [(1.0, 1 / 158), (0.3, 1e-4), (4.0, 0.01)]:
            cal = calibrate_numeric(PrivacyBudget(eps, delta), 2.0, 10)
            assert gaussian_privacy_curve(cal.sigma, 0.2, eps) <= delta
            assert gaussian_privacy_curve(0.999 * cal.sigma, 0.2, eps) > delta

    def test_at_most_classical(self):
        cal_n = calibrate_numeric(PrivacyBudget(1.0, 1 / 158), 2.0, 158)
        assert cal_n.sigma <= SIGMA_CLASSICAL_158

    def test_tiny_epsilon_scan_oracle(self):
        # Brute-force scan of the exact curve: at (eps=1e-5, delta=1/47,
        # sensitivity 2, count 47) the curve is met near sigma ~ 0.8 because
        # the exact mechanism stays finite as eps -> 0. It is the *classical*
        # route whose sigma exceeds 1e3 here, which is why the experiment
        # pipeline uses it for the infinite-noise regime.
        budget = PrivacyBudget(1e-5, 1 / 47)
        cal = calibrate_numeric(budget, 2.0, 47)
        sigmas = np.linspace(0.05, 5.0, 2000)
        met = [s for s in sigmas if gaussian_privacy_curve(s, 2 / 47, 1e-5) <= 1 / 47]
        scan_sigma = met[0]
        assert abs(cal.sigma - scan_sigma) <= (sigmas[1] - sigmas[0])
        assert calibrate_classical(budget, 2.0, 47).sigma > 1e3

    def test_monotone_in_budget(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            eps = rng.uniform(0.05, 3.0)
            delta = 10.0 ** rng.uniform(-6, -1)
            base = calibrate_numeric(PrivacyBudget(eps, delta), 1.0, 1).sigma
            wider_eps = calibrate_numeric(PrivacyBudget(eps * 1.5, delta), 1.0, 1).sigma
            wider_delta = calibrate_numeric(
                PrivacyBudget(eps, min(delta * 5, 0.5)), 1.0, 1
            ).sigma
            assert wider_eps <= base
            assert wider_delta <= base


class TestAmplification:
    def test_tenth_rate_value(self):
        out = amplify_by_subsampling(PrivacyBudget(1.0, 0.01), SubsampleConfig(100, 10))
        assert out.epsilon == pytest.approx(EPS_AMPLIFIED_01, abs=1e-12)
        assert out.delta == pytest.approx(0.001, rel=1e-15)

    def test_full_rate_is_identity(self):
        base = PrivacyBudget(0.8, 0.02)
        out = amplify_by_subsampling(base, SubsampleConfig(50, 50))
        assert out.epsilon == pytest.approx(base.epsilon, rel=1e-15)
        assert out.delta == base.delta

    def test_first_order_in_rate_for_tiny_epsilon(self):
        out = amplify_by_subsampling(PrivacyBudget(1e-3, 0.01), SubsampleConfig(10, 1))
        assert 0.0999 <= out.epsilon / 1e-3 <= 0.1001

    def test_amplified_epsilon_never_larger(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            eps = rng.uniform(1e-4, 5.0)
            n = int(rng.integers(2, 200))
            m = int(rng.integers(1, n + 1))
            out = amplify_by_subsampling(
                PrivacyBudget(eps, 0.01), SubsampleConfig(n, m)
            )
            assert out.epsilon <= eps + 1e-15

    def test_strictly_increasing_in_rate_and_epsilon(self):
        eps_grid = [0.1, 0.5, 1.0, 2.0]
        outs = [
            amplify_by_subsampling(PrivacyBudget(e, 0.01), SubsampleConfig(100, 10))
            for e in eps_grid
        ]
        assert all(a.epsilon < b.epsilon for a, b in zip(outs, outs[1:]))
        m_grid = [5, 10, 20, 50]
        outs = [
            amplify_by_subsampling(PrivacyBudget(1.0, 0.01), SubsampleConfig(100, m))
            for m in m_grid
        ]
        assert all(a.epsilon < b.epsilon for a, b in zip(outs, outs[1:]))


class TestInvertAmplification:
    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(300):
            n = int(rng.integers(2, 300))
            m = int(rng.integers(1, n + 1))
            cfg = SubsampleConfig(n, m)
            target = PrivacyBudget(rng.uniform(1e-4, 4.0), 10.0 ** rng.uniform(-8, -3))
            base = invert_amplification(target, cfg)
            back = amplify_by_subsampling(base, cfg)
            assert back.epsilon == pytest.approx(target.epsilon, rel=1e-12)
            assert back.delta == pytest.approx(target.delta, rel=1e-12)

    def test_inverse_of_amplify_example(self):
        base = invert_amplification(
            PrivacyBudget(EPS_AMPLIFIED_01, 0.001), SubsampleConfig(100, 10)
        )
        assert base.epsilon == pytest.approx(1.0, rel=1e-12)

    def test_full_rate_identity(self):
        target = PrivacyBudget(0.8, 0.02)
        base = invert_amplification(target, SubsampleConfig(9, 9))
        assert base.epsilon == pytest.approx(target.epsilon, rel=1e-15)

    def test_rejects_unreachable_delta(self):
        with pytest.raises(ValueError):
            invert_amplification(PrivacyBudget(1.0, 0.3), SubsampleConfig(10, 2))
