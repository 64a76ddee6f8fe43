"""Gaussian mechanism calibration and subsampling amplification.

Two calibration routes are provided and kept side by side on purpose:

- ``calibrate_classical`` evaluates the textbook closed form
  sigma = (Delta/n) * sqrt(2*ln(1.25/delta)) / epsilon, which is simple,
  reproducible, and diverges as epsilon -> 0 (arbitrarily small epsilon
  demands arbitrarily large noise). It is only a valid guarantee for
  epsilon <= 1.
- ``calibrate_numeric`` bisects the exact Gaussian privacy curve
  delta(eps; sigma) and therefore returns the smallest sigma that actually
  achieves the target budget, for any epsilon. Note that the exact curve
  stays finite as epsilon -> 0 whenever delta > 0, so the two routes
  disagree sharply in the small-epsilon regime.

``gaussian_privacy_curve`` is the verification oracle both routes are
checked against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import log_ndtr, ndtr

_BISECT_RTOL = 1e-9
_MAX_BRACKET = 200
_MAX_BISECT = 500


@dataclass(frozen=True)
class PrivacyBudget:
    """An (epsilon, delta) differential privacy target."""

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError(f"epsilon must be positive and finite, got {self.epsilon}")
        if not (0.0 < self.delta < 1.0):
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")


@dataclass(frozen=True)
class NoiseCalibration:
    """Calibrated noise scale for an aggregate of `count` bounded vectors.

    `sensitivity` is the l2 diameter bound of a single member; the released
    mean of `count` members has l2 sensitivity sensitivity/count, and
    `sigma` is the per-coordinate standard deviation of the added noise.
    """

    sigma: float
    sensitivity: float
    count: int

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be positive and finite, got {self.sigma}")
        if not (self.sensitivity > 0 and math.isfinite(self.sensitivity)):
            raise ValueError(f"sensitivity must be positive, got {self.sensitivity}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")


@dataclass(frozen=True)
class SubsampleConfig:
    """Uniform without-replacement subsampling of `sample` out of `population`."""

    population: int
    sample: int

    def __post_init__(self):
        if self.population < 1:
            raise ValueError(f"population must be >= 1, got {self.population}")
        if not (1 <= self.sample <= self.population):
            raise ValueError(
                f"sample must lie in [1, {self.population}], got {self.sample}"
            )

    @property
    def rate(self) -> float:
        return self.sample / self.population


def calibrate_classical(
    budget: PrivacyBudget, sensitivity: float, count: int
) -> NoiseCalibration:
    """Closed-form Gaussian noise scale for a mean of `count` vectors.

    Returns sigma = (sensitivity/count) * sqrt(2*ln(1.25/delta)) / epsilon.
    Deterministic. The bound is only a valid (epsilon, delta) guarantee for
    epsilon <= 1; use `calibrate_numeric` outside that range.
    """
    if not (sensitivity > 0 and math.isfinite(sensitivity)):
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    log_arg = 1.25 / budget.delta
    if log_arg <= 1.0:
        raise ValueError(f"delta={budget.delta} leaves log(1.25/delta) nonpositive")
    sigma = (sensitivity / count) * math.sqrt(2.0 * math.log(log_arg)) / budget.epsilon
    return NoiseCalibration(sigma=sigma, sensitivity=sensitivity, count=count)


def gaussian_privacy_curve(sigma: float, sensitivity: float, epsilon: float) -> float:
    """Exact privacy curve of the Gaussian mechanism.

    Returns the smallest delta such that adding N(0, sigma^2 I) to a function
    with l2 sensitivity `sensitivity` is (epsilon, delta)-DP:

        delta = Phi(D/(2s) - e*s/D) - exp(e) * Phi(-D/(2s) - e*s/D)

    with D = sensitivity, s = sigma, e = epsilon, and Phi the standard normal
    CDF. The second term is evaluated in log space so large epsilon cannot
    overflow. Strictly decreasing in sigma and in epsilon.
    """
    if not (sigma > 0 and math.isfinite(sigma)):
        raise ValueError(f"sigma must be positive and finite, got {sigma}")
    if not (sensitivity > 0 and math.isfinite(sensitivity)):
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    if epsilon < 0 or not math.isfinite(epsilon):
        raise ValueError(f"epsilon must be >= 0 and finite, got {epsilon}")
    a = sensitivity / (2.0 * sigma) - epsilon * sigma / sensitivity
    b = sensitivity / (2.0 * sigma) + epsilon * sigma / sensitivity
    # epsilon + log Phi(-b) <= log Phi(a) <= 0, so the exponent cannot overflow.
    delta = float(ndtr(a)) - math.exp(epsilon + float(log_ndtr(-b)))
    return min(max(delta, 0.0), 1.0)


def calibrate_numeric(
    budget: PrivacyBudget, sensitivity: float, count: int
) -> NoiseCalibration:
    """Smallest sigma meeting the budget on the exact Gaussian privacy curve.

    Bisects `gaussian_privacy_curve` at effective sensitivity
    sensitivity/count down to relative width 1e-9 and returns the upper end
    of the bracket, so the result is guaranteed to satisfy the curve. Always
    at most the classical sigma when the classical bound applies.
    """
    if not (sensitivity > 0 and math.isfinite(sensitivity)):
        raise ValueError(f"sensitivity must be positive, got {sensitivity}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    effective = sensitivity / count
    target = budget.delta

    def meets(s: float) -> bool:
        return gaussian_privacy_curve(s, effective, budget.epsilon) <= target

    hi = effective  # any positive starting point; brackets adjust from here
    for _ in range(_MAX_BRACKET):
        if meets(hi):
            break
        hi *= 2.0
    else:
        raise RuntimeError("failed to bracket sigma from above during calibration")
    lo = hi / 2.0
    for _ in range(_MAX_BRACKET):
        if not meets(lo):
            break
        hi = lo
        lo /= 2.0
    else:
        raise RuntimeError("failed to bracket sigma from below during calibration")

    for _ in range(_MAX_BISECT):
        if hi - lo <= _BISECT_RTOL * hi:
            break
        mid = 0.5 * (lo + hi)
        if meets(mid):
            hi = mid
        else:
            lo = mid
    else:
        raise RuntimeError("sigma bisection did not converge")
    return NoiseCalibration(sigma=hi, sensitivity=sensitivity, count=count)


def amplify_by_subsampling(
    base: PrivacyBudget, config: SubsampleConfig
) -> PrivacyBudget:
    """Privacy guarantee after uniform without-replacement subsampling.

    A mechanism that is (eps, delta)-DP on datasets of size `sample` is
    (eps', delta')-DP on the full population of size `population`, with
    eps' = ln(1 + (m/n)(e^eps - 1)) and delta' = (m/n) delta.
    """
    q = config.rate
    eps_amp = math.log1p(q * math.expm1(base.epsilon))
    return PrivacyBudget(epsilon=eps_amp, delta=q * base.delta)


def invert_amplification(
    target: PrivacyBudget, config: SubsampleConfig
) -> PrivacyBudget:
    """Base budget whose subsampled amplification meets `target`.

    Algebraic inverse of `amplify_by_subsampling`: eps = ln(1 + (n/m)(e^eps' - 1)),
    delta = (n/m) delta'. Round-trips with the forward map to within 1e-12
    relative error.
    """
    r = 1.0 / config.rate
    delta_base = r * target.delta
    if delta_base >= 1.0:
        raise ValueError(
            f"target delta {target.delta} cannot be met: base delta "
            f"{delta_base} >= 1 at sampling rate {config.rate}"
        )
    eps_base = math.log1p(r * math.expm1(target.epsilon))
    return PrivacyBudget(epsilon=eps_base, delta=delta_base)
