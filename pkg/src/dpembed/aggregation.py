"""Noisy centroid release of unit-norm embedding vectors.

The release pipeline is: optionally subsample m of n members without
replacement, average, and add isotropic Gaussian noise calibrated so the
release meets a target (epsilon, delta) budget. Normalizing every member to
unit l2 norm bounds the centroid's sensitivity by 2/count, which is what the
calibration relies on; unnormalized members are therefore rejected at
release time rather than silently fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .privacy import (
    NoiseCalibration,
    PrivacyBudget,
    SubsampleConfig,
    calibrate_classical,
    calibrate_numeric,
    invert_amplification,
)
from .rng import stream

NORM_TOL = 1e-9
MEMBER_DIAMETER = 2.0  # l2 diameter of the unit sphere


def _freeze(values: np.ndarray) -> np.ndarray:
    out = np.array(values, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension real vector, optionally certified unit-norm."""

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("embedding must be a nonempty 1-d vector")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding entries must be finite")
        if self.normalized:
            err = abs(float(np.linalg.norm(self.values)) - 1.0)
            if err > NORM_TOL:
                raise ValueError(f"normalized flag set but |norm - 1| = {err:.3g}")

    @property
    def dimension(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class EmbeddingSet:
    """An ordered collection of same-dimension embeddings with audit labels."""

    members: tuple
    source_labels: tuple = ()

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("embedding set must be nonempty")
        dim = members[0].dimension
        if any(m.dimension != dim for m in members):
            raise ValueError("embedding set members must share one dimension")
        labels = tuple(self.source_labels)
        if not labels:
            labels = tuple(str(i) for i in range(len(members)))
        if len(labels) != len(members):
            raise ValueError("one source label per member is required")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "source_labels", labels)

    def __len__(self) -> int:
        return len(self.members)

    @property
    def dimension(self) -> int:
        return self.members[0].dimension

    def matrix(self) -> np.ndarray:
        return np.stack([m.values for m in self.members])

    def all_normalized(self) -> bool:
        return all(m.normalized for m in self.members)


@dataclass(frozen=True)
class NoisyCentroid:
    """A released centroid: values plus the calibration that produced it.

    `calibration` is None for a noise-free (non-private baseline) release;
    `subsample` is None when the full set was averaged.
    """

    values: np.ndarray
    calibration: NoiseCalibration | None
    subsample: SubsampleConfig | None
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "values", _freeze(self.values))

    @property
    def dimension(self) -> int:
        return self.values.size


def normalize(e: Embedding) -> Embedding:
    """Scale to unit l2 norm, preserving direction.

    Zero vectors are rejected: scaling them cannot restore the sensitivity
    bound and accepting them would weaken the privacy guarantee silently.
    """
    norm = float(np.linalg.norm(e.values))
    if norm == 0.0:
        raise ValueError("cannot normalize a zero embedding")
    return Embedding(values=e.values / norm, normalized=True)


def centroid(s: EmbeddingSet) -> np.ndarray:
    """Mean of the members, summed in a canonical content order.

    Members are sorted lexicographically by coordinates before the
    sequential summation, so any permutation of the same multiset yields a
    bit-identical result.
    """
    mat = s.matrix()
    order = np.lexsort(mat.T[::-1])
    total = np.zeros(s.dimension)
    for i in order:
        total += mat[i]
    return total / len(s)


def subsample(s: EmbeddingSet, m: int, seed: int) -> EmbeddingSet:
    """Draw m distinct members uniformly without replacement."""
    n = len(s)
    if not (1 <= m <= n):
        raise ValueError(f"subsample size must lie in [1, {n}], got {m}")
    idx = stream(seed, "subsample").choice(n, size=m, replace=False)
    idx.sort()
    return EmbeddingSet(
        members=tuple(s.members[i] for i in idx),
        source_labels=tuple(s.source_labels[i] for i in idx),
    )


def release(
    s: EmbeddingSet,
    budget: PrivacyBudget | None,
    m: int | None,
    seed: int,
    method: str = "numeric",
) -> NoisyCentroid:
    """Release the (optionally subsampled) centroid under Gaussian noise.

    Pipeline: verify all members are unit-norm, subsample to m when
    requested, average, and add i.i.d. N(0, sigma^2) per coordinate with
    sigma calibrated at sensitivity 2/count. When m < n the budget is first
    inverted through the subsampling amplification bound so the *amplified*
    guarantee meets `budget`. A None budget releases the exact centroid
    (non-private baseline; sigma = 0).

    `method` selects the calibration route: "numeric" (exact privacy curve)
    or "classical" (closed form, diverges as epsilon -> 0).

    Deterministic given (s, budget, m, seed, method).
    """
    if method not in ("numeric", "classical"):
        raise ValueError(f"unknown calibration method {method!r}")
    for label, member in zip(s.source_labels, s.members):
        if not member.normalized:
            raise ValueError(f"member {label!r} is not flagged normalized")
        if abs(float(np.linalg.norm(member.values)) - 1.0) > NORM_TOL:
            raise ValueError(f"member {label!r} is not unit-norm")

    n = len(s)
    sub_cfg = None
    working = s
    effective_budget = budget
    count = n
    if m is not None:
        sub_cfg = SubsampleConfig(population=n, sample=m)
        working = subsample(s, m, seed)
        count = m
        if budget is not None and m < n:
            effective_budget = invert_amplification(budget, sub_cfg)

    values = centroid(working)
    calibration = None
    if effective_budget is not None:
        calibrate = calibrate_numeric if method == "numeric" else calibrate_classical
        calibration = calibrate(effective_budget, MEMBER_DIAMETER, count)
        noise = stream(seed, "noise").standard_normal(s.dimension)
        values = values + calibration.sigma * noise
    return NoisyCentroid(
        values=values, calibration=calibration, subsample=sub_cfg, seed=seed
    )
