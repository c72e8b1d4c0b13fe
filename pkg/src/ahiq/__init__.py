"""Hybrid ViT+CNN full-reference image quality assessment.

A desk-scale, dependency-light implementation: a reverse-mode tensor engine,
two-branch feature extraction, reference-guided deformable feature fusion,
patch-wise weighted score prediction, and a training/evaluation harness with
correlation metrics and a portable checkpoint format.
"""

from .backbones import CNNConfig, ViTConfig
from .metrics import EvalReport, main_score, plcc, psnr, srocc
from .model import AHIQModel, ModelConfig, full_b8, full_b16, toy_b8, toy_b16
from .tensor import GradTape, Tensor, backward, no_grad
from .train_eval import TrainConfig, evaluate, train

__all__ = [
    "AHIQModel",
    "CNNConfig",
    "EvalReport",
    "GradTape",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "ViTConfig",
    "backward",
    "evaluate",
    "full_b16",
    "full_b8",
    "main_score",
    "no_grad",
    "plcc",
    "psnr",
    "srocc",
    "toy_b16",
    "toy_b8",
    "train",
]
__version__ = "0.1.0"
