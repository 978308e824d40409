"""Transition-conditioned video generation on a synthetic tabletop world.

The package covers the full desk-scale pipeline: episode generation with
exact ground truth, a transition vision-language model, transition
conditioning with Gaussian range weights, a video diffusion U-Net with
object-aware auxiliary supervision, metrics, and a CLI.
"""

from .config import RunConfig, load_config, parse_config
from .diffusion import (DenoiserUNet, LocalizationHead, NoiseSchedule,
                        ddim_sample, downsample_mask, q_sample, training_loss)
from .errors import (ConfigError, DecodeError, DivergenceError, EIVSTError,
                     GradCheckError, ShapeError, ValidationError)
from .gradcheck import grad_check
from .metrics import fvd_lite, mask_iou, vic, vtc, vtq
from .tc import (TCModule, compose_frame_conditions, gaussian_range_weights,
                 mix_transition_features)
from .tvlm import TransitionModel, predict_plan, train_transition_model
from .world import (Episode, Instruction, PlanStep, SceneState, TransitionPlan,
                    generate_episode, plan_transition, render_scene)

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "load_config", "parse_config",
    "DenoiserUNet", "LocalizationHead", "NoiseSchedule",
    "ddim_sample", "downsample_mask", "q_sample", "training_loss",
    "ConfigError", "DecodeError", "DivergenceError", "EIVSTError",
    "GradCheckError", "ShapeError", "ValidationError",
    "grad_check",
    "fvd_lite", "mask_iou", "vic", "vtc", "vtq",
    "TCModule", "compose_frame_conditions", "gaussian_range_weights",
    "mix_transition_features",
    "TransitionModel", "predict_plan", "train_transition_model",
    "Episode", "Instruction", "PlanStep", "SceneState", "TransitionPlan",
    "generate_episode", "plan_transition", "render_scene",
    "__version__",
]
