"""Energy-based models trained by diffusion contrastive divergence, with CD/PCD baselines.

Everything runs on numpy through a small reverse-mode autodiff engine
that supports gradients of gradients (scores, Laplacians and their
parameter derivatives).
"""

from . import autodiff, datasets, diffusion, experiments, models, objectives, oracles, samplers
from .diffusion import VeSchedule
from .experiments import ExperimentConfig, RunRecord, run_eval, run_train
from .models import MlpEbm, QuadraticEbm, TimeEbm, init_params, init_time_ebm
from .samplers import LangevinConfig, ReplayBuffer

__all__ = [
    "autodiff", "datasets", "diffusion", "experiments", "models", "objectives", "oracles", "samplers",
    "VeSchedule", "ExperimentConfig", "RunRecord", "run_eval", "run_train",
    "MlpEbm", "QuadraticEbm", "TimeEbm", "init_params", "init_time_ebm", "LangevinConfig", "ReplayBuffer",
]

__version__ = "0.1.0"
