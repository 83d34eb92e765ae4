"""Volumetric brain-tumor segmentation with a CNN encoder, a transformer bottleneck and a CNN decoder.

Everything runs on numpy: a small reverse-mode autograd engine, 3D
convolution kernels, the segmentation network, Dice/HD95 metrics, NIfTI-1
ingestion, training and sliding-window inference.
"""

from .complexity import count_flops, count_macs, count_params, stage_inventory
from .config import PRESETS, ModelConfig, load_config, preset
from .errors import ConfigError, ContractError, DataError, DomainError, NumericalError, ShapeError, TransBTSError
from .inference import sliding_window_infer, tta_infer
from .metrics import RegionMapping, dice_score, evaluate_case, hausdorff95, softmax_dice_loss
from .model import TransBTS, build_model, model_forward
from .tensor import Tensor, no_grad
from .train import load_checkpoint, poly_lr, save_checkpoint, train_loop

__version__ = "0.1.0"

__all__ = [
    "PRESETS",
    "ConfigError",
    "ContractError",
    "DataError",
    "DomainError",
    "ModelConfig",
    "NumericalError",
    "RegionMapping",
    "ShapeError",
    "Tensor",
    "TransBTS",
    "TransBTSError",
    "build_model",
    "count_flops",
    "count_macs",
    "count_params",
    "dice_score",
    "evaluate_case",
    "hausdorff95",
    "load_checkpoint",
    "load_config",
    "model_forward",
    "no_grad",
    "poly_lr",
    "preset",
    "save_checkpoint",
    "sliding_window_infer",
    "softmax_dice_loss",
    "stage_inventory",
    "train_loop",
    "tta_infer",
]
