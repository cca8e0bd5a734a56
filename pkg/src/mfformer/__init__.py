"""Fusion transformer for paired resting-state fMRI and T1-weighted MRI.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`mfformer.tensor`) with layers in :mod:`mfformer.nn`.
"""

from .estimator import MFFormerClassifier, make_pcc_mlp
from .model import MFFormer, ModelConfig, VARIANTS
from .tensor import Tensor, no_grad
from .train import ScheduleConfig, TrainConfig, lr_at_epoch, metrics

__all__ = [
    "MFFormer",
    "MFFormerClassifier",
    "ModelConfig",
    "ScheduleConfig",
    "Tensor",
    "TrainConfig",
    "VARIANTS",
    "lr_at_epoch",
    "make_pcc_mlp",
    "metrics",
    "no_grad",
]

__version__ = "0.1.0"
