"""OverNet single-image super-resolution on a self-contained numpy core.

Arbitrary-scale upscaling from one network: features are reconstructed on an
over-scaled grid and resized to any rational scale up to ``max_scale``.
"""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import CheckpointError, ConfigurationError, NumericError, OverNetError, UsageError
from .imageops import DegradationSpec, bicubic_resize, degrade, png_read, png_write, rgb_to_y
from .metrics import EvalReport, ScaleSet, multiscale_l1, psnr, ssim
from .model import ModelConfig, init_params, overnet_forward, param_count, super_resolve, tiny_config
from .params import ParamStore, adam_step
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigurationError", "DegradationSpec", "EvalReport", "ModelConfig",
    "NumericError", "OverNetError", "ParamStore", "ScaleSet", "Tensor", "TrainConfig", "UsageError",
    "adam_step", "backward", "bicubic_resize", "degrade", "evaluate", "init_params", "load_checkpoint",
    "multiscale_l1", "no_grad", "overnet_forward", "param_count", "png_read", "png_write", "psnr",
    "rgb_to_y", "save_checkpoint", "ssim", "super_resolve", "tiny_config", "train",
]
