"""Noise schedule and deterministic DDIM stepping algebra.

The schedule stores cumulative-product signal levels alpha_t in (0, 1),
strictly decreasing in t, with alpha_0 defined as 1. A reverse step first
predicts the clean image from the current state and the predicted noise,
then re-mixes it at the previous noise level using the same noise estimate:

    x0_hat  = (x_t - sqrt(1 - a_t) eps) / sqrt(a_t)
    x_{t-1} = sqrt(a_{t-1}) x0_hat + sqrt(1 - a_{t-1}) eps

which makes the sampler deterministic given the initial state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ImageTensor:
    """A flattened H x W grayscale image with pixel values around [-1, 1].

    Intermediate diffusion states reuse this container, so only shape and
    finiteness are enforced; the [-1, 1] range is a property of clean data.
    """

    pixels: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        pixels = np.array(self.pixels, dtype=np.float64)
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)
        if pixels.ndim != 1 or pixels.size != self.height * self.width:
            raise ValueError(
                f"expected {self.height}x{self.width}={self.height * self.width} "
                f"pixels, got shape {pixels.shape}"
            )
        if not np.all(np.isfinite(pixels)):
            raise ValueError("image pixels must be finite")

    @property
    def dimension(self) -> int:
        return self.pixels.size

    def grid(self) -> np.ndarray:
        return self.pixels.reshape(self.height, self.width)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Cumulative signal levels {alpha_t}, strictly decreasing, alpha_0 = 1."""

    steps: int
    alpha: np.ndarray

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=np.float64)
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        if self.steps < 1 or alpha.shape != (self.steps,):
            raise ValueError("schedule must hold one alpha per step")
        if not (np.all(alpha > 0) and np.all(alpha < 1)):
            raise ValueError("alpha values must lie in (0, 1)")
        if not np.all(np.diff(alpha) < 0):
            raise ValueError("alpha values must be strictly decreasing")

    def alpha_bar(self, t: int) -> float:
        """Signal level at step t, with alpha_0 = 1 by convention."""
        if not (0 <= t <= self.steps):
            raise ValueError(f"t must lie in [0, {self.steps}], got {t}")
        return 1.0 if t == 0 else float(self.alpha[t - 1])


def make_schedule(steps: int) -> DiffusionSchedule:
    """Linear per-step beta schedule rescaled to the given step count.

    Betas run linearly from 1e-4*(1000/steps) to 0.02*(1000/steps), clamped
    below 0.999; alpha_t is the running product of (1 - beta).
    """
    if steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {steps}")
    scale = 1000.0 / steps
    betas = np.linspace(1e-4 * scale, 0.02 * scale, steps)
    betas = np.clip(betas, 1e-12, 0.999)
    alpha = np.cumprod(1.0 - betas)
    return DiffusionSchedule(steps=steps, alpha=alpha)


def _check_step(t: int, sched: DiffusionSchedule) -> None:
    if not (1 <= t <= sched.steps):
        raise ValueError(f"t must lie in [1, {sched.steps}], got {t}")


def forward_noise(
    x0: ImageTensor, t: int, eps: np.ndarray, sched: DiffusionSchedule
) -> ImageTensor:
    """Noisy state x_t = sqrt(a_t) x_0 + sqrt(1 - a_t) eps."""
    _check_step(t, sched)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.pixels.shape:
        raise ValueError(f"noise shape {eps.shape} does not match image")
    a = sched.alpha_bar(t)
    return ImageTensor(
        pixels=np.sqrt(a) * x0.pixels + np.sqrt(1.0 - a) * eps,
        height=x0.height,
        width=x0.width,
    )


def predict_x0(
    x_t: ImageTensor, eps_hat: np.ndarray, t: int, sched: DiffusionSchedule
) -> ImageTensor:
    """Clean-image estimate x0_hat = (x_t - sqrt(1 - a_t) eps_hat) / sqrt(a_t)."""
    _check_step(t, sched)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    a = sched.alpha_bar(t)
    return ImageTensor(
        pixels=(x_t.pixels - np.sqrt(1.0 - a) * eps_hat) / np.sqrt(a),
        height=x_t.height,
        width=x_t.width,
    )


def ddim_step(
    x_t: ImageTensor, eps_hat: np.ndarray, t: int, sched: DiffusionSchedule
) -> ImageTensor:
    """One deterministic reverse step from x_t to x_{t-1}."""
    _check_step(t, sched)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    x0_hat = predict_x0(x_t, eps_hat, t, sched)
    a_prev = sched.alpha_bar(t - 1)
    return ImageTensor(
        pixels=np.sqrt(a_prev) * x0_hat.pixels + np.sqrt(1.0 - a_prev) * eps_hat,
        height=x_t.height,
        width=x_t.width,
    )
