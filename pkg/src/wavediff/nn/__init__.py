"""Framework-free tensors, autograd, 3D U-Nets and training."""

from wavediff.nn.checkpoint import Checkpoint, CheckpointError
from wavediff.nn.layers import ConfigError
from wavediff.nn.models import NetworkDenoiser, UNet3D, UNetConfig
from wavediff.nn.optim import Adam
from wavediff.nn.tensor import Tensor, no_grad
from wavediff.nn.train import NumericalError, TrainConfig, predict_detail, train_detail, train_generator

__all__ = [
    "Adam",
    "Checkpoint",
    "CheckpointError",
    "ConfigError",
    "NetworkDenoiser",
    "NumericalError",
    "Tensor",
    "TrainConfig",
    "UNet3D",
    "UNetConfig",
    "no_grad",
    "predict_detail",
    "train_detail",
    "train_generator",
]
