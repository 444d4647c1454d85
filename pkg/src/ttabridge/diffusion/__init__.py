from .model import (
    ConditionalDiffusion,
    ConditioningError,
    DiffusionTrainer,
    SamplingError,
    guided_eps,
    sample,
    training_loss,
)
from .schedule import NoiseSchedule, cosine_alpha_bar, make_cosine_schedule, q_sample, respace_schedule
from .unet import DenoiserConfig, TinyDenoiser, UNetDenoiser, build_denoiser

__all__ = [
    "ConditionalDiffusion",
    "ConditioningError",
    "DenoiserConfig",
    "DiffusionTrainer",
    "NoiseSchedule",
    "SamplingError",
    "TinyDenoiser",
    "UNetDenoiser",
    "build_denoiser",
    "cosine_alpha_bar",
    "guided_eps",
    "make_cosine_schedule",
    "q_sample",
    "respace_schedule",
    "sample",
    "training_loss",
]
