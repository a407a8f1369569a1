"""Mask-aware state-space vision blocks for sparse and partially observed images."""

from .block import PatchMambaBlock, pvm_forward, pvm_residual, vm_forward, vm_residual
from .errors import PVMError
from .masks import KernelFootprint, ValidityRule, propagate_receptive_field
from .models import ClsConfig, ClsModel, DepthConfig, DepthModel, cls_forward, dc_forward
from .partial import fill_until_valid, partial_linear, pconv2d, std_conv2d_masked
from .tensor import MaskedTensor, TokenSequence

__version__ = "0.1.0"

__all__ = [
    "MaskedTensor",
    "TokenSequence",
    "KernelFootprint",
    "ValidityRule",
    "propagate_receptive_field",
    "pconv2d",
    "std_conv2d_masked",
    "partial_linear",
    "fill_until_valid",
    "PatchMambaBlock",
    "pvm_forward",
    "pvm_residual",
    "vm_forward",
    "vm_residual",
    "ClsConfig",
    "ClsModel",
    "DepthConfig",
    "DepthModel",
    "cls_forward",
    "dc_forward",
    "PVMError",
]
