"""Gaussian diffusion forward process, marginals, and mean parameterization.

Pure numpy functions over a precomputed noise schedule. Every stochastic
input (the noise draw) is supplied by the caller, so each operation here is
a deterministic function of its arguments and safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "make_linear_schedule",
    "schedule_from_betas",
    "forward_step",
    "forward_marginal",
    "posterior_mean_from_eps",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed per-step noise variances and their cumulative products."""

    T: int
    betas: np.ndarray       # (T,) variance added at each step, each in (0, 1)
    alphas: np.ndarray      # (T,) equal to 1 - betas
    alpha_bars: np.ndarray  # (T,) cumulative product of alphas


def schedule_from_betas(betas) -> NoiseSchedule:
    """Build a schedule from an explicit beta sequence, validating ranges."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ValueError("betas must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(betas)):
        raise ValueError("betas must be finite")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=int(betas.size), betas=betas, alphas=alphas,
                         alpha_bars=alpha_bars)


def make_linear_schedule(T: int, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (math.isfinite(beta_start) and math.isfinite(beta_end)):
        raise ValueError("beta bounds must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return schedule_from_betas(betas)


def _check_timestep(t: int, schedule: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < schedule.T:
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")
    return t


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what} shape {b.shape} does not match input shape {a.shape}")


def forward_step(x_prev: np.ndarray, t: int, noise: np.ndarray,
                 schedule: NoiseSchedule) -> np.ndarray:
    """Single noising step: scale the sample down and mix in fresh noise."""
    t = _check_timestep(t, schedule)
    x_prev = np.asarray(x_prev)
    noise = np.asarray(noise)
    _check_same_shape(x_prev, noise, "noise")
    beta = float(schedule.betas[t])
    return math.sqrt(1.0 - beta) * x_prev + math.sqrt(beta) * noise


def forward_marginal(x0: np.ndarray, t: int, eps: np.ndarray,
                     schedule: NoiseSchedule) -> np.ndarray:
    """Jump straight to step ``t``: sqrt(abar)*x0 + sqrt(1-abar)*eps."""
    t = _check_timestep(t, schedule)
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps, "eps")
    abar = float(schedule.alpha_bars[t])
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def posterior_mean_from_eps(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                            schedule: NoiseSchedule) -> np.ndarray:
    """Denoising mean given a noise estimate for the current step."""
    t = _check_timestep(t, schedule)
    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    _check_same_shape(x_t, eps_hat, "eps_hat")
    abar = float(schedule.alpha_bars[t])
    if abar >= 1.0:
        raise ValueError(f"alpha_bar[{t}] = {abar} leaves a zero denominator")
    alpha = float(schedule.alphas[t])
    beta = float(schedule.betas[t])
    return (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
