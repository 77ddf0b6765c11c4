"""Prototype-guided conditional diffusion for class-conditional image synthesis."""

from .diffusion import (NoiseSchedule, forward_marginal, forward_step,
                        make_linear_schedule, posterior_mean_from_eps,
                        schedule_from_betas)
from .prototypes import (Codebook, PrototypeTrainConfig,
                         assignment_probabilities, class_probability,
                         dce_loss, prototype_loss, total_loss,
                         train_prototypes)
from .denoiser import (ConditioningTable, DenoiserConfig, DiffusionTrainer,
                       NoisePredictor, build_condition, desk_config,
                       init_from_prototypes, init_random, predict_noise,
                       sinusoidal_time_embedding)
from .sampler import SamplerSpec, ddim_step, ddpm_step, guided_epsilon, sample

__version__ = "0.1.0"
