"""Continuous-time latent dynamics over spectral connectivity graphs."""
from .autodiff import Tape, Tensor, backward, gradcheck
from .config import ModelConfig, RunConfig, TrainConfig
from .metrics import MetricsReport, compute_auroc, compute_f1_acc_recall
from .model import Model
from .neural_ode import rk4_step, solve_trajectory

__all__ = ["Tape", "Tensor", "backward", "gradcheck", "ModelConfig", "RunConfig", "TrainConfig", "MetricsReport",
           "compute_auroc", "compute_f1_acc_recall", "Model", "rk4_step", "solve_trajectory"]
__version__ = "0.1.0"
