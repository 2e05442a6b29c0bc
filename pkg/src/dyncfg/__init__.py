"""Per-step guidance-scale search with noisy-latent evaluators on analytic mixture worlds."""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, cfg_combine, ddim_step, ddpm_step, forward_noise, predict_x0
from .guidance import (
    Annealing,
    Dynamic,
    Fixed,
    GuidanceCandidateSet,
    Interval,
    StaticLookup,
    adaptive_weights,
    dynamic_select,
    run_guided_chain,
    scale_at,
)
from .world import MixtureWorld, default_world, hard_world, preset

__all__ = [
    "Annealing",
    "Dynamic",
    "Fixed",
    "GuidanceCandidateSet",
    "Interval",
    "MixtureWorld",
    "NoiseSchedule",
    "StaticLookup",
    "adaptive_weights",
    "cfg_combine",
    "ddim_step",
    "ddpm_step",
    "default_world",
    "dynamic_select",
    "forward_noise",
    "hard_world",
    "predict_x0",
    "preset",
    "run_guided_chain",
    "scale_at",
]
