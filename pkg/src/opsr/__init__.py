"""Operational neural network engine for hyperspectral single-image
super-resolution: tensor kernels, Self-ONN layers, the SRCNN/SRONN/sSRONN
architectures, degradation-model data pipeline, training loop, and
PSNR/SSIM/SAM quality metrics.
"""

__version__ = "0.1.0"

from .tensor_ops import Rng
from .models import ModelSpec, build_model, count_params, load_checkpoint, save_checkpoint
from .data import HsiCube, load_cube, save_cube
from .training import TrainConfig, train, grad_audit
from .metrics import MetricsReport, evaluate, psnr, sam, ssim
