"""Desk-scale classification and depth-completion models, losses and metrics.

Each model class owns one set of weights usable by both variants:

* ``pvm``: mask-aware path (partial convolutions, PVM blocks, partial pooling,
  iterative filling);
* ``vm``: the mask-unaware baseline, which consumes ``x.values`` as given
  (the data pipeline stores zeros at invalid pixels) and only carries the mask
  for bookkeeping.

On fully valid inputs the two variants compute the same function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .block import PatchMambaBlock, TokenPadding, pvm_residual, vm_residual
from .errors import PreconditionError, ShapeError
from .partial import fill_until_valid, partial_global_pool, pconv2d, std_conv2d_masked
from .tensor import MaskedTensor, TokenSequence, concat_channels, elementwise_combine

Variant = Literal["pvm", "vm"]

__all__ = [
    "ClsConfig",
    "ClsModel",
    "cls_forward",
    "DepthConfig",
    "DepthModel",
    "DepthOutput",
    "dc_forward",
    "charbonnier_loss",
    "rmse_mae_valid",
    "topk_accuracy",
    "cross_entropy",
]


def _conv_weight(out_ch: int, in_ch: int, k: int) -> tuple[nn.Parameter, nn.Parameter]:
    conv = nn.Conv2d(in_ch, out_ch, k)  # reuse torch's default init
    return nn.Parameter(conv.weight.detach().clone()), nn.Parameter(conv.bias.detach().clone())


def _require_valid(x: MaskedTensor) -> None:
    m = x.mask if x.mask.dim() == 3 else x.mask.unsqueeze(0)
    if not bool(m.flatten(1).any(dim=1).all()):
        raise PreconditionError("the pvm variant needs at least one valid pixel per sample")


def _batched(x: MaskedTensor) -> tuple[MaskedTensor, bool]:
    if x.values.dim() == 3:
        return MaskedTensor(x.values.unsqueeze(0), x.mask.unsqueeze(0), 2), True
    if x.values.dim() != 4:
        raise ShapeError(f"expected (C, H, W) or (B, C, H, W) input, got {tuple(x.values.shape)}")
    return x, False


@dataclass
class ClsConfig:
    image_size: int = 32
    channels: int = 1
    patch: int = 4
    dim: int = 64
    expand: int = 2
    state: int = 8
    blocks: int = 2
    classes: int = 10
    token_padding: TokenPadding = "learned"
    norm_before_substitution: bool = False
    variant: Variant = "pvm"

    def __post_init__(self) -> None:
        if self.image_size % self.patch:
            raise ValueError("image size must be divisible by the patch size")
        if self.blocks < 1 or self.classes < 2:
            raise ValueError("need at least one block and two classes")


class ClsModel(nn.Module):
    """Patch stem -> residual (P)VM blocks -> global pooling -> linear head."""

    def __init__(self, cfg: ClsConfig):
        super().__init__()
        self.cfg = cfg
        self.stem_weight, self.stem_bias = _conv_weight(cfg.dim, cfg.channels, cfg.patch)
        self.blocks = nn.ModuleList(
            PatchMambaBlock(
                cfg.dim,
                cfg.dim,
                patch=1,
                expand=cfg.expand,
                state=cfg.state,
                token_padding=cfg.token_padding,
                norm_before_substitution=cfg.norm_before_substitution,
            )
            for _ in range(cfg.blocks)
        )
        self.head_norm = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.classes)

    def forward(self, x: MaskedTensor, variant: Variant | None = None) -> torch.Tensor:
        return cls_forward(x, self, variant or self.cfg.variant)


def cls_forward(x: MaskedTensor, model: ClsModel, variant: Variant = "pvm") -> torch.Tensor:
    """Class logits, shape ``(B, classes)`` (or ``(classes,)`` for one image)."""
    x, squeeze = _batched(x)
    p = model.cfg.patch
    if variant == "pvm":
        _require_valid(x)
        h = pconv2d(x, model.stem_weight, model.stem_bias, stride=p)
        for blk in model.blocks:
            h = pvm_residual(h, blk)
        tokens = TokenSequence(h.values.flatten(2).transpose(1, 2), h.mask.flatten(1))
        vec, _ = partial_global_pool(tokens)
    elif variant == "vm":
        h = std_conv2d_masked(x, model.stem_weight, model.stem_bias, stride=p)
        for blk in model.blocks:
            h = vm_residual(h, blk)
        tokens = h.values.flatten(2).transpose(1, 2)
        vec = tokens.sum(-2) / tokens.shape[-2]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    logits = model.head(model.head_norm(vec))
    return logits.squeeze(0) if squeeze else logits


@dataclass
class DepthConfig:
    size: int = 64
    channels: int = 1
    features: int = 16
    rpssb: int = 6
    pvmm_per_block: int = 2
    patch: int = 8
    dim: int = 64
    expand: int = 2
    state: int = 8
    fill_kernel: int = 3
    max_fill: int = 64
    depth_scale: float = 80.0
    token_padding: TokenPadding = "learned"
    norm_before_substitution: bool = False
    variant: Variant = "pvm"

    def __post_init__(self) -> None:
        if self.rpssb < 1 or self.pvmm_per_block < 1:
            raise ValueError("block counts must be >= 1")
        if self.size % self.patch:
            raise ValueError("input size must be divisible by the patch size")
        if self.fill_kernel % 2 == 0:
            raise ValueError("filling kernel must be odd")


class RPSSB(nn.Module):
    """Residual block of (P)VM modules followed by a 3x3 (partial) convolution."""

    def __init__(self, cfg: DepthConfig):
        super().__init__()
        self.modules_ = nn.ModuleList(
            PatchMambaBlock(
                cfg.features,
                cfg.dim,
                patch=cfg.patch,
                expand=cfg.expand,
                state=cfg.state,
                token_padding=cfg.token_padding,
                norm_before_substitution=cfg.norm_before_substitution,
            )
            for _ in range(cfg.pvmm_per_block)
        )
        self.conv_weight, self.conv_bias = _conv_weight(cfg.features, cfg.features, 3)


class DepthModel(nn.Module):
    """Shallow partial conv, deep residual (P)VM stack, filling layer, conv head."""

    def __init__(self, cfg: DepthConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.features
        self.sfe_weight, self.sfe_bias = _conv_weight(f, cfg.channels, 3)
        self.dfe = nn.ModuleList(RPSSB(cfg) for _ in range(cfg.rpssb))
        self.fill_weight, self.fill_bias = _conv_weight(2 * f, 2 * f, cfg.fill_kernel)
        self.head1_weight, self.head1_bias = _conv_weight(f, 2 * f, 3)
        self.head2_weight, self.head2_bias = _conv_weight(1, f, 3)
        with torch.no_grad():
            self.head2_bias.fill_(0.4)

    def forward(self, x: MaskedTensor, variant: Variant | None = None) -> "DepthOutput":
        return dc_forward(x, self, variant or self.cfg.variant)


@dataclass
class DepthOutput:
    depth: torch.Tensor  # (B, 1, H, W), meters
    mask: torch.Tensor  # (B, H, W)
    fill_iters: torch.Tensor  # (B,)
    dfe_mask_in: torch.Tensor = field(repr=False)
    dfe_mask_out: torch.Tensor = field(repr=False)


def dc_forward(x: MaskedTensor, model: DepthModel, variant: Variant = "pvm") -> DepthOutput:
    """Dense depth from a sparse map (values in meters, zeros at invalid pixels)."""
    x, _ = _batched(x)
    cfg = model.cfg
    scale = cfg.depth_scale
    xn = MaskedTensor(x.values / scale, x.mask, 2)
    if variant == "pvm":
        _require_valid(x)
        shallow = pconv2d(xn, model.sfe_weight, model.sfe_bias, padding=1)
        deep = shallow
        for block in model.dfe:
            h = deep
            for pvmm in block.modules_:
                h = pvm_residual(h, pvmm)
            h = pconv2d(h, block.conv_weight, block.conv_bias, padding=1)
            deep = elementwise_combine(deep, h, "add")
        feat = concat_channels([shallow, deep])
        filled, iters = fill_until_valid(feat, model.fill_weight, model.fill_bias, cfg.max_fill)
        features, out_mask = filled.values, filled.mask
    elif variant == "vm":
        shallow = std_conv2d_masked(xn, model.sfe_weight, model.sfe_bias, padding=1)
        deep = shallow
        for block in model.dfe:
            h = deep
            for vmm in block.modules_:
                h = vm_residual(h, vmm)
            h = std_conv2d_masked(h, block.conv_weight, block.conv_bias, padding=1)
            deep = MaskedTensor(deep.values + h.values, deep.mask & h.mask, 2)
        features = torch.cat([shallow.values, deep.values], dim=1)
        out_mask = shallow.mask & deep.mask
        iters = torch.zeros(x.values.shape[0], dtype=torch.long)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    h = F.gelu(F.conv2d(features, model.head1_weight, model.head1_bias, padding=1))
    depth = F.conv2d(h, model.head2_weight, model.head2_bias, padding=1) * scale
    return DepthOutput(depth, out_mask, iters, shallow.mask, deep.mask)


def _valid_diff(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    mask = mask.to(torch.bool).expand_as(pred) if mask.shape != pred.shape else mask.to(torch.bool)
    n = mask.sum()
    if int(n) == 0:
        raise PreconditionError("no valid ground-truth pixel")
    diff = torch.where(mask, pred - gt, torch.zeros((), dtype=pred.dtype))
    return diff, n


def charbonnier_loss(
    pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor, eps: float = 1e-3
) -> torch.Tensor:
    """Mean of ``sqrt(d**2 + eps**2)`` over valid ground-truth pixels."""
    diff, n = _valid_diff(pred, gt, mask)
    m = mask.to(torch.bool).expand_as(pred)
    per = torch.sqrt(diff * diff + eps * eps)
    return torch.where(m, per, torch.zeros((), dtype=per.dtype)).sum() / n


def rmse_mae_valid(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> tuple[float, float]:
    diff, n = _valid_diff(pred.detach().double(), gt.double(), mask)
    rmse = torch.sqrt((diff * diff).sum() / n)
    mae = diff.abs().sum() / n
    return float(rmse), float(mae)


def topk_accuracy(logits: torch.Tensor, labels: torch.Tensor, k: int) -> float:
    """Fraction of rows whose label ranks among the ``k`` largest logits.

    Ties go to the lower class index.
    """
    if logits.dim() == 1:
        logits, labels = logits.unsqueeze(0), labels.reshape(1)
    classes = logits.shape[-1]
    if k < 1 or k > classes:
        raise ValueError(f"k must be in [1, {classes}]")
    labels = labels.long()
    if bool((labels < 0).any()) or bool((labels >= classes).any()):
        raise ValueError("label out of range")
    own = logits.gather(1, labels.unsqueeze(1))
    idx = torch.arange(classes).unsqueeze(0)
    ahead = (logits > own) | ((logits == own) & (idx < labels.unsqueeze(1)))
    rank = ahead.sum(1)
    return float((rank < k).double().mean())


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood, stabilized with log-sum-exp."""
    if logits.dim() == 1:
        logits, labels = logits.unsqueeze(0), torch.as_tensor(labels).reshape(1)
    labels = labels.long()
    classes = logits.shape[-1]
    if bool((labels < 0).any()) or bool((labels >= classes).any()):
        raise ValueError("label out of range")
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(1, labels.unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()
