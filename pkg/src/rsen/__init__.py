"""Single-image rain streak removal with a residual squeeze-and-excitation
encoder-decoder, built on a self-contained rank-4 tensor core with
reverse-mode automatic differentiation."""

from .checkpoint import load_checkpoint, read_meta, save_checkpoint
from .data import ImagePair, StreakParams, load_image, load_pair_dir, save_image, synthesize_rain
from .errors import (
    CheckpointError,
    CheckpointMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
    DivergenceError,
)
from .metrics import EvalReport, EvalRow, bench_forward, eval_dir, eval_pairs, psnr, ssim
from .model import (
    ModelConfig,
    ParameterStore,
    conv_specs,
    forward,
    init_params,
    param_count,
    rse_block,
    se_block,
)
from .tensor import ConvParams, Tensor, conv2d, finite_diff_check
from .training import AdamState, TrainConfig, adam_step, lr_schedule, mse_loss, sample_patch, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ConvParams",
    "conv2d",
    "finite_diff_check",
    "ModelConfig",
    "ParameterStore",
    "conv_specs",
    "init_params",
    "param_count",
    "forward",
    "se_block",
    "rse_block",
    "TrainConfig",
    "AdamState",
    "adam_step",
    "lr_schedule",
    "mse_loss",
    "sample_patch",
    "train",
    "ImagePair",
    "StreakParams",
    "load_image",
    "save_image",
    "load_pair_dir",
    "synthesize_rain",
    "save_checkpoint",
    "load_checkpoint",
    "read_meta",
    "psnr",
    "ssim",
    "eval_pairs",
    "eval_dir",
    "bench_forward",
    "EvalReport",
    "EvalRow",
    "DimensionError",
    "ConfigError",
    "CheckpointError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "CheckpointMismatchError",
    "DivergenceError",
    "__version__",
]
