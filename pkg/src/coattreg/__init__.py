"""Co-attention guided unsupervised deformable image registration on numpy."""

from .coattention import CoAttentionOutput, CoAttentionParams, co_attention_forward, init_coattention
from .errors import DataError, NumericError, RegError, ResourceError, ShapeError, UsageError
from .losses import LossWeights, kl_loss, ncc_loss, total_loss
from .metrics import EvalReport, LabelVolume, dice, evaluate_registration, hausdorff, jacobian_analysis, warp_labels
from .network import (DeformationField, FlowDistribution, NetworkConfig, Registration, RegistrationNet,
                      init_params, integrate_svf, register_pair, upsample_flow)
from .phantom import SynthCase, generate_gt_pair, generate_phantom
from .tensor import Tensor, no_grad, precision
from .volio import Volume, checkpoint_load, checkpoint_save, read_volume, write_volume

__version__ = "0.1.0"

__all__ = [
    "CoAttentionOutput", "CoAttentionParams", "co_attention_forward", "init_coattention",
    "DataError", "NumericError", "RegError", "ResourceError", "ShapeError", "UsageError",
    "LossWeights", "kl_loss", "ncc_loss", "total_loss",
    "EvalReport", "LabelVolume", "dice", "evaluate_registration", "hausdorff", "jacobian_analysis", "warp_labels",
    "DeformationField", "FlowDistribution", "NetworkConfig", "Registration", "RegistrationNet",
    "init_params", "integrate_svf", "register_pair", "upsample_flow",
    "SynthCase", "generate_gt_pair", "generate_phantom",
    "Tensor", "no_grad", "precision",
    "Volume", "checkpoint_load", "checkpoint_save", "read_volume", "write_volume",
]
