"""Geometry-guided sampling: steering DDPM means with the Sampson error gradient.

The guidance density is ``p(I | x) ∝ exp(-sum_ij e_ij)`` over all matched frame
pairs, so ``grad log p`` is minus the gradient of the total robust Sampson
error. Each guided diffusion step runs a fixed number of ascent iterations on
the predicted mean: ``mean += s * g`` with the strength ``s`` clipped so that
the update never exceeds ``alpha * ||mean||``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import DiffusionSchedule, ddpm_sample
from .geometry import DEFAULT_EPSILON, PoseTuple, StackedMatches, total_sampson_and_grad

log = logging.getLogger(__name__)

# nominal image half-width in pixels: normalized coordinates are scaled by this
# before the Sampson error is formed, so epsilon is in squared pixels
DEFAULT_PIXEL_SCALE = 32.0


@dataclass(frozen=True)
class GuidanceConfig:
    epsilon: float = DEFAULT_EPSILON
    alpha: float = 1e-4
    ggs_iters: int = 100
    guided_last_steps: int = 10
    pixel_scale: float = DEFAULT_PIXEL_SCALE
    strength: float | None = 1.0  # base s before the cap; None steps at the cap every time
    enabled: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.alpha < 0 or self.ggs_iters < 0 or self.guided_last_steps < 0 or (
                self.strength is not None and self.strength < 0):
            raise ValueError("alpha, ggs_iters, guided_last_steps and strength must be non-negative")
        if not self.pixel_scale > 0:
            raise ValueError("pixel_scale must be positive")

    @property
    def active(self) -> bool:
        return (self.enabled and self.alpha > 0 and self.ggs_iters > 0
                and self.guided_last_steps > 0 and self.strength != 0)


def log_guidance_density(poses, matches, epsilon: float = DEFAULT_EPSILON,
                         pixel_scale: float = 1.0) -> float:
    """``log p(I | x)`` up to an additive constant: minus the summed Sampson errors."""
    params = poses.params if isinstance(poses, PoseTuple) else np.asarray(poses, float)
    stacked = StackedMatches.from_sets(matches, len(params))
    if stacked is None:
        return 0.0
    return -total_sampson_and_grad(params, stacked, epsilon, pixel_scale)[0]


def guidance_gradient(mean, stacked: StackedMatches, config: GuidanceConfig, pivot: int | None = 0):
    """``grad log p(I | x)`` at ``mean`` with the pivot's extrinsics frozen."""
    _, grad = total_sampson_and_grad(mean, stacked, config.epsilon, config.pixel_scale)
    g = -grad
    if pivot is not None:
        g[pivot, 1:] = 0.0
    return g


def guided_mean(raw_mean, x_t, matches, config: GuidanceConfig, pivot: int | None = 0,
                stacked: StackedMatches | None = None, history: list | None = None):
    """Run ``config.ggs_iters`` capped ascent steps on the predicted mean.

    Each update is ``s * g`` with ``s = min(strength, alpha * ||mean|| / ||g||)``.
    ``x_t`` is accepted for interface symmetry with the sampler; the gradient
    is evaluated at the current mean. A non-finite gradient cancels guidance
    for this call and ``raw_mean`` is returned.
    """
    if stacked is None:
        stacked = StackedMatches.from_sets(matches, len(raw_mean))
    if stacked is None or not config.active:
        return raw_mean
    mean = np.array(raw_mean, dtype=float)
    for it in range(config.ggs_iters):
        g = guidance_gradient(mean, stacked, config, pivot)
        if not (np.isfinite(g).all() and np.isfinite(mean).all()):
            log.warning("non-finite guidance gradient at iteration %d; guidance skipped", it)
            return raw_mean
        g_norm = float(np.linalg.norm(g))
        if g_norm == 0.0:
            break
        s = config.alpha * float(np.linalg.norm(mean)) / g_norm
        if config.strength is not None:
            s = min(s, config.strength)
        step = s * g
        if history is not None:
            history.append(float(np.linalg.norm(step)) / max(float(np.linalg.norm(mean)), 1e-300))
        mean = mean + step
    return mean


def _as_denoise_fn(model_or_fn, schedule, pivot):
    if callable(model_or_fn) and not isinstance(model_or_fn, torch.nn.Module):
        return model_or_fn
    from .denoiser import make_denoise_fn
    return make_denoise_fn(model_or_fn, schedule, pivot)


def guided_ddpm_sample(model_or_fn, schedule: DiffusionSchedule, conditioning, matches,
                       config: GuidanceConfig, rng: np.random.Generator, *, pivot: int = 0,
                       stochastic: bool = True, on_step=None) -> PoseTuple:
    """DDPM sampling whose last ``guided_last_steps`` means are geometry-guided.

    With guidance inactive (disabled, zero alpha/iterations/steps or no
    matches) this is exactly :func:`ddpm_sample` under the same generator.
    """
    n = len(conditioning)
    denoise_fn = _as_denoise_fn(model_or_fn, schedule, pivot)
    stacked = StackedMatches.from_sets(matches, n)
    hook = None
    if config.active and stacked is not None:
        def hook(mu, x_t, t):
            if t > config.guided_last_steps:
                return mu
            return guided_mean(mu, x_t, matches, config, pivot=pivot, stacked=stacked)
    return ddpm_sample(denoise_fn, schedule, conditioning, n, rng, stochastic=stochastic,
                       mean_hook=hook, on_step=on_step)


def refine_poses(poses: PoseTuple, matches, config: GuidanceConfig, pivot: int = 0,
                 n_rounds: int | None = None) -> PoseTuple:
    """Apply guidance to a fixed estimate (no diffusion), e.g. to a regressed pose tuple.

    ``n_rounds`` rounds of ``ggs_iters`` iterations. The default is one round:
    a one-shot estimate gets one guidance application, as one guided step would.
    """
    rounds = 1 if n_rounds is None else n_rounds
    stacked = StackedMatches.from_sets(matches, len(poses))
    mean = poses.params
    for _ in range(rounds):
        mean = guided_mean(mean, mean, matches, config, pivot=pivot, stacked=stacked)
    if not math.isfinite(float(np.sum(mean))):
        return poses
    return PoseTuple(mean).normalized()
