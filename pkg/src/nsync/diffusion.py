"""DDPM noise schedule, forward noising, the denoising loss, and DDIM sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from nsync.errors import NumericalError
from nsync.numerics import autodiff as ad

DEFAULT_T = 200
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.02
DEFAULT_DDIM_STEPS = 50


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    def describe(self) -> dict:
        return {
            "kind": "linear",
            "T": self.T,
            "beta_min": float(self.betas[0]),
            "beta_max": float(self.betas[-1]),
        }


def make_linear_schedule(
    T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN, beta_max: float = DEFAULT_BETA_MAX
) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"need at least 2 timesteps, got T={T}")
    if not (0.0 < beta_min < beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T)
    alphas = 1.0 - betas
    return NoiseSchedule(betas, alphas, np.cumprod(alphas))


@dataclass(frozen=True)
class NoisedSample:
    z_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def q_sample(z0, t, eps, schedule: NoiseSchedule) -> NoisedSample:
    """Closed-form forward noising ``sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``z0`` and ``eps`` are (d,) or (n, d); ``t`` is an int or an (n,) array.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} does not match data shape {z0.shape}")
    t = np.asarray(t, dtype=np.int64)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t]
    if z0.ndim == 2:
        ab = ab.reshape(-1, 1)
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return NoisedSample(z_t, t, eps)


def ti_loss(denoiser: Callable, z0, t, eps, cond, schedule: NoiseSchedule) -> ad.Node:
    """Denoising loss as a graph node: mean of ``(eps - eps_hat)^2``.

    ``denoiser(z_t, t, cond)`` must return a Node; ``cond`` may be a Node so
    the loss is differentiable with respect to the conditioning.
    """
    noised = q_sample(z0, t, eps, schedule)
    eps_hat = denoiser(noised.z_t, noised.t, cond)
    loss = ad.mean(ad.square(ad.sub(np.asarray(eps, dtype=np.float64), eps_hat)))
    if not np.isfinite(loss.value):
        raise NumericalError("denoising loss is non-finite")
    return loss


def ddim_timesteps(T: int, n_steps: int) -> np.ndarray:
    """Evenly strided descending timestep subsequence ending at 0."""
    if n_steps < 1:
        raise ValueError("n_steps must be at least 1")
    if n_steps > T:
        raise ValueError(f"n_steps={n_steps} exceeds T={T}")
    if n_steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(T - 1, 0, n_steps)).astype(np.int64)


def ddim_sample(
    eps_fn: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray],
    cond: np.ndarray,
    n_steps: int,
    seed: int,
    schedule: NoiseSchedule,
    d_data: int,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling, one sample per row of ``cond``.

    ``eps_fn(z_t, t, cond)`` is a plain-array noise predictor. The starting
    noise is drawn from ``numpy.random.default_rng(seed)``.
    """
    steps = ddim_timesteps(schedule.T, n_steps)
    cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
    n = cond.shape[0]
    x = np.random.default_rng(seed).standard_normal((n, d_data))
    ab = schedule.alpha_bars
    for i, t in enumerate(steps):
        ab_t = ab[t]
        ab_prev = ab[steps[i + 1]] if i + 1 < len(steps) else 1.0
        eps = eps_fn(x, np.full(n, t, dtype=np.int64), cond)
        x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
        x = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps
    if not np.all(np.isfinite(x)):
        raise NumericalError("DDIM produced non-finite samples")
    return x
