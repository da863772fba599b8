"""Variance schedule, closed-form forward noising and the reverse DDPM sampler.

Diffusion runs on the unconstrained ``(N, 8)`` pose block; quaternions are
only re-normalized once the final sample is decoded.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import PARAM_DIM, PoseTuple

log = logging.getLogger(__name__)

DEFAULT_T = 100
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.2

__all__ = [
    "DiffusionSchedule", "SamplerError", "PoseTuple", "make_schedule", "forward_step",
    "noise_sample", "ddpm_sample",
]


class SamplerError(FloatingPointError):
    """The denoiser produced non-finite values during sampling."""

    def __init__(self, step: int, message: str = ""):
        super().__init__(message or f"non-finite denoiser output at step t={step}")
        self.step = step


@dataclass(frozen=True)
class DiffusionSchedule:
    """Per-step ``beta``; ``alpha`` and ``alpha_bar`` are derived.

    Steps are 1-based as in the usual DDPM notation: ``alpha_bar_at(t)`` for
    ``t`` in ``1..T``, and ``alpha_bar_at(0) == 1``.
    """

    beta: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def alpha_bar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        self._check_step(t)
        return float(self.beta[t - 1])

    def _check_step(self, t):
        if not 1 <= t <= self.T:
            raise IndexError(f"diffusion step {t} outside [1, {self.T}]")

    @property
    def is_terminal_gaussian(self) -> bool:
        """Whether ``q(x_T)`` is close to ``N(0, I)`` (``alpha_bar_T <= 1e-3``)."""
        return bool(self.alpha_bar[-1] <= 1e-3)


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> DiffusionSchedule:
    """Linear beta schedule over ``T`` steps."""
    if T < 2:
        raise ValueError(f"need at least 2 diffusion steps, got T={T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    schedule = DiffusionSchedule(np.linspace(beta_start, beta_end, T))
    if not schedule.is_terminal_gaussian:
        warnings.warn(
            f"alpha_bar_T = {schedule.alpha_bar[-1]:.3g} > 1e-3; x_T is not close to N(0, I)",
            stacklevel=2,
        )
    return schedule


def forward_step(x_prev, t: int, schedule: DiffusionSchedule, rng: np.random.Generator):
    """One noising transition ``q(x_t | x_{t-1})``."""
    beta = schedule.beta_at(t)
    x_prev = np.asarray(x_prev, dtype=float)
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * rng.standard_normal(x_prev.shape)


def noise_sample(x0, t: int, schedule: DiffusionSchedule, rng: np.random.Generator | None = None,
                 noise=None):
    """Draw ``x_t ~ q(x_t | x_0)`` in closed form.

    Pass ``noise`` to fix ``z`` (e.g. zeros for the deterministic mean).
    """
    schedule._check_step(t)
    ab = schedule.alpha_bar_at(t)
    x0 = np.asarray(x0, dtype=float)
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(noise, dtype=float)


DenoiseFn = Callable[[np.ndarray, int, object], np.ndarray]
MeanHook = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def ddpm_sample(denoise_fn: DenoiseFn, schedule: DiffusionSchedule, conditioning, n_frames: int,
                rng: np.random.Generator, *, stochastic: bool = True,
                mean_hook: MeanHook | None = None, on_step=None) -> PoseTuple:
    """Reverse diffusion from ``x_T ~ N(0, I)``.

    Each step predicts the clean block ``mu = denoise_fn(x_t, t, conditioning)``
    and draws ``x_{t-1} ~ N(sqrt(abar_{t-1}) mu, (1 - abar_{t-1}) I)``. The
    last step returns ``mu`` without noise. ``mean_hook(mu, x_t, t)`` may
    replace the predicted mean (used by geometry guidance) and
    ``on_step(t, x_t, mu)`` observes every step.

    With ``stochastic=False`` every Gaussian draw is replaced by zeros.
    """
    shape = (n_frames, PARAM_DIM)
    x = rng.standard_normal(shape) if stochastic else np.zeros(shape)
    mu = x
    for t in range(schedule.T, 0, -1):
        mu = np.asarray(denoise_fn(x, t, conditioning), dtype=float)
        if mu.shape != shape:
            raise ValueError(f"denoise_fn returned shape {mu.shape}, expected {shape}")
        if not np.isfinite(mu).all():
            raise SamplerError(t)
        if mean_hook is not None:
            mu = mean_hook(mu, x, t)
        if on_step is not None:
            on_step(t, x, mu)
        ab_prev = schedule.alpha_bar_at(t - 1)
        if t > 1:
            z = rng.standard_normal(shape) if stochastic else np.zeros(shape)
            x = np.sqrt(ab_prev) * mu + np.sqrt(1.0 - ab_prev) * z
    poses = PoseTuple(mu)
    if not np.isfinite(poses.log_focals).all() or np.any(np.linalg.norm(poses.quats, axis=1) == 0):
        raise SamplerError(1, "final sample does not decode to valid cameras")
    return poses.normalized()
