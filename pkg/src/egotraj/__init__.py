"""Egocentric pedestrian trajectory prediction.

Selective state-space encoders over pedestrian and ego-vehicle motion, an
ego-guided decoder, and residual regression against a constant-velocity /
constant-scaling reference trajectory, on a small numpy autodiff core.
"""

from .autodiff import Tensor, grad_check, smooth_l1
from .metrics import MetricsReport, ade, arb, compute_report, fde, frb
from .model import ModelConfig, count_params, init_params, predict
from .train import TrainConfig, evaluate, load_checkpoint, save_checkpoint, train_loop

__all__ = [
    "Tensor", "grad_check", "smooth_l1",
    "MetricsReport", "ade", "fde", "arb", "frb", "compute_report",
    "ModelConfig", "init_params", "predict", "count_params",
    "TrainConfig", "train_loop", "evaluate", "save_checkpoint", "load_checkpoint",
]
