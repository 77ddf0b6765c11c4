"""Ancestral and accelerated deterministic sampling with guidance mixing.

Batches are seeded independently from (seed, batch index), so chunking the
request differently, or running chunks in parallel, cannot change the output
images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .denoiser import NoisePredictor, predict_noise
from .diffusion import NoiseSchedule, posterior_mean_from_eps

__all__ = [
    "SamplerSpec",
    "guided_epsilon",
    "ddpm_step",
    "ddim_step",
    "ddim_timesteps",
    "sample",
]


@dataclass(frozen=True)
class SamplerSpec:
    method: str = "ddim"            # "ddim" or "ddpm"
    num_steps: int = 50             # ddim timestep subset size
    eta: float = 0.0                # ddim stochasticity; 0 = deterministic
    guidance_scale: float = 1.0
    seed: int = 0
    num_images: int = 1
    batch_size: int = 16
    class_id: int | None = None
    clip_denoised: bool = True      # clamp the implied x0 to [-1, 1] per step

    def __post_init__(self) -> None:
        if self.method not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampling method {self.method!r}")
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must be in [0, 1]")
        if self.guidance_scale < 0.0:
            raise ValueError("guidance_scale must be non-negative")
        if self.num_images < 1 or self.batch_size < 1:
            raise ValueError("num_images and batch_size must be positive")


def guided_epsilon(eps_cond: np.ndarray, eps_uncond: np.ndarray,
                   w: float) -> np.ndarray:
    """Classifier-free mix: uncond + w * (cond - uncond); w=1 is pure conditional."""
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError(f"shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    # The w in {0, 1} identities must hold exactly, not up to roundoff.
    if w == 0.0:
        return eps_uncond.copy()
    if w == 1.0:
        return eps_cond.copy()
    return eps_uncond + w * (eps_cond - eps_uncond)


def ddpm_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray, noise: np.ndarray,
              schedule: NoiseSchedule) -> np.ndarray:
    """One ancestral step: posterior mean plus sqrt(beta_t) noise, none at t=0."""
    mean = posterior_mean_from_eps(x_t, t, eps_hat, schedule)
    if t == 0:
        return mean
    return mean + math.sqrt(float(schedule.betas[t])) * np.asarray(noise)


def ddim_step(x_t: np.ndarray, t: int, t_prev: int, eps_hat: np.ndarray,
              eta: float, schedule: NoiseSchedule,
              noise: np.ndarray | None = None) -> np.ndarray:
    """Jump from step t to t_prev; t_prev = -1 denotes the clean endpoint."""
    if not 0 <= t < schedule.T:
        raise IndexError(f"timestep {t} outside [0, {schedule.T})")
    if not -1 <= t_prev < t:
        raise ValueError(f"need -1 <= t_prev < t, got t_prev={t_prev}, t={t}")
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must be in [0, 1]")
    ab_t = float(schedule.alpha_bars[t])
    if ab_t <= 0.0 or ab_t >= 1.0:
        raise ValueError(f"degenerate alpha_bar[{t}] = {ab_t}")
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bars[t_prev])

    x_t = np.asarray(x_t)
    eps_hat = np.asarray(eps_hat)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} != input shape {x_t.shape}")

    x0_pred = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = (eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
             * math.sqrt(1.0 - ab_t / ab_prev))
    # Roundoff can push the direction term's radicand a hair below zero.
    dir_coef = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    out = math.sqrt(ab_prev) * x0_pred + dir_coef * eps_hat
    if eta > 0.0 and sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a caller-supplied noise draw")
        out = out + sigma * np.asarray(noise)
    return out


def ddim_timesteps(T: int, num_steps: int) -> np.ndarray:
    """Descending uniform-stride subset of [0, T) including T-1 and 0."""
    if num_steps > T:
        raise ValueError(f"num_steps {num_steps} exceeds schedule length {T}")
    ts = np.unique(np.linspace(0, T - 1, num_steps).round().astype(int))
    return ts[::-1].copy()


def _batch_rng(seed: int, batch_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, batch_index)))


def _clip_denoised_eps(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                       schedule: NoiseSchedule) -> np.ndarray:
    """Clamp the x0 implied by eps_hat to [-1, 1], returned as an adjusted
    noise estimate so the step operations stay unchanged. Near t = T the x0
    reconstruction divides by a tiny sqrt(abar); without this, prediction
    error early in sampling compounds into saturated outputs.
    """
    ab = float(schedule.alpha_bars[t])
    x0 = (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    x0 = np.clip(x0, -1.0, 1.0)
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)


def sample(model: NoisePredictor, spec: SamplerSpec,
           schedule: NoiseSchedule) -> np.ndarray:
    """Generate spec.num_images images for one class (or unconditionally).

    Returns a float32 array (N, C, H, W) clamped to [-1, 1]. Deterministic:
    the (seed, spec, model weights) triple fully determines the output.
    """
    config = model.config
    if spec.class_id is not None and not 0 <= spec.class_id < model.null_index:
        raise KeyError(f"unknown class id {spec.class_id}")
    if schedule.T != config.timesteps:
        raise ValueError(f"schedule T={schedule.T} != model timesteps={config.timesteps}")
    if spec.method == "ddim":
        subset = ddim_timesteps(schedule.T, spec.num_steps)
        pairs = [(int(subset[i]), int(subset[i + 1]) if i + 1 < len(subset) else -1)
                 for i in range(len(subset))]
    shape = (config.in_channels, config.input_size, config.input_size)

    out = np.empty((spec.num_images, *shape), dtype=np.float32)
    done = 0
    batch_index = 0
    while done < spec.num_images:
        b = min(spec.batch_size, spec.num_images - done)
        rng = _batch_rng(spec.seed, batch_index)
        x = rng.standard_normal((b, *shape)).astype(np.float32)
        if spec.method == "ddpm":
            for t in range(schedule.T - 1, -1, -1):
                eps = _guided_prediction(model, x, t, spec)
                if spec.clip_denoised:
                    eps = _clip_denoised_eps(x, t, eps, schedule)
                noise = rng.standard_normal(x.shape) if t > 0 else 0.0
                x = ddpm_step(x, t, eps, noise, schedule)
        else:
            for t, t_prev in pairs:
                eps = _guided_prediction(model, x, t, spec)
                if spec.clip_denoised:
                    eps = _clip_denoised_eps(x, t, eps, schedule)
                noise = (rng.standard_normal(x.shape)
                         if spec.eta > 0.0 and t_prev >= 0 else None)
                x = ddim_step(x, t, t_prev, eps, spec.eta, schedule, noise)
        out[done:done + b] = np.clip(x, -1.0, 1.0).astype(np.float32)
        done += b
        batch_index += 1
    return out


def _guided_prediction(model: NoisePredictor, x: np.ndarray, t: int,
                       spec: SamplerSpec) -> np.ndarray:
    eps_uncond = predict_noise(model, x, t, None)
    if spec.class_id is None:
        return eps_uncond
    eps_cond = predict_noise(model, x, t, spec.class_id)
    return guided_epsilon(eps_cond, eps_uncond, spec.guidance_scale)
