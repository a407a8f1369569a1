"""Partial Vision Mamba block and its mask-unaware counterpart.

Both paths share one parameter container, :class:`PatchMambaBlock`, so that a
PVM model and its VM baseline are weight-compatible:

* ``pvm_forward``: partial patch embedding (mean-padded partial linear) ->
  invalid tokens replaced by the mask token -> selective-scan block -> patch
  reconstruction.  The output map is fully valid.
* ``vm_forward``: plain patch embedding of the values as given -> the same
  block -> reconstruction, with honest bookkeeping: a token is invalid when its
  patch holds any invalid pixel, and a bidirectional scan over any invalid
  token invalidates the whole sequence.
"""

from __future__ import annotations

from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .errors import PreconditionError, ShapeError
from .masks import ValidityRule, propagate_dense, propagate_sequence
from .partial import partial_linear
from .ssm import ScanMode, VMBlock, vm_block
from .tensor import MaskedTensor, TokenSequence, elementwise_combine

__all__ = [
    "TokenPadding",
    "patchify",
    "unpatchify",
    "partial_patch_embed",
    "patch_embed",
    "substitute_masked_tokens",
    "pad_masked_tokens",
    "PatchMambaBlock",
    "pvm_forward",
    "pvm_residual",
    "vm_forward",
    "vm_residual",
]

TokenPadding = Literal["learned", "mean", "zero"]


def patchify(values: torch.Tensor, mask: torch.Tensor | None, patch: int):
    """Split ``(B, C, H, W)`` into row-major ``(B, L, C, P, P)`` patches.

    The mask ``(B, H, W)`` is split the same way into ``(B, L, P, P)``.
    """
    b, c, h, w = values.shape
    if h % patch or w % patch:
        raise ShapeError(f"{h}x{w} map is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    pv = values.reshape(b, c, gh, patch, gw, patch).permute(0, 2, 4, 1, 3, 5)
    pv = pv.reshape(b, gh * gw, c, patch, patch)
    if mask is None:
        return pv, None
    pm = mask.reshape(b, gh, patch, gw, patch).permute(0, 1, 3, 2, 4)
    return pv, pm.reshape(b, gh * gw, patch, patch)


def unpatchify(tokens: torch.Tensor, channels: int, patch: int, h: int, w: int) -> torch.Tensor:
    """Inverse of :func:`patchify` for ``(B, L, C * P * P)`` token payloads."""
    b = tokens.shape[0]
    gh, gw = h // patch, w // patch
    x = tokens.reshape(b, gh, gw, channels, patch, patch).permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, h, w)


def _token_mask_to_map(token_mask: torch.Tensor, patch: int, h: int, w: int) -> torch.Tensor:
    b = token_mask.shape[0]
    gh, gw = h // patch, w // patch
    m = token_mask.reshape(b, gh, 1, gw, 1).expand(b, gh, patch, gw, patch)
    return m.reshape(b, h, w)


def _as_batched(x: MaskedTensor) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if x.spatial_ndim != 2:
        raise ShapeError("expected a channel-first 2-D feature map")
    if x.values.dim() == 3:
        return x.values.unsqueeze(0), x.mask.unsqueeze(0), True
    return x.values, x.mask, False


def partial_patch_embed(
    x: MaskedTensor, weight: torch.Tensor, bias: torch.Tensor | None, patch: int
) -> TokenSequence:
    """Mask-aware patch embedding: any patch with a valid pixel gives a valid token."""
    values, mask, squeeze = _as_batched(x)
    pv, pm = patchify(values, mask, patch)
    tokens, valid = partial_linear(MaskedTensor(pv, pm, 2), weight, bias)
    if squeeze:
        tokens, valid = tokens.squeeze(0), valid.squeeze(0)
    return TokenSequence(tokens, valid)


def patch_embed(
    values: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None, patch: int
) -> torch.Tensor:
    """Standard patch embedding: flatten each patch and apply a linear map."""
    squeeze = values.dim() == 3
    if squeeze:
        values = values.unsqueeze(0)
    pv, _ = patchify(values, None, patch)
    tokens = F.linear(pv.flatten(-3), weight, bias)
    return tokens.squeeze(0) if squeeze else tokens


def substitute_masked_tokens(t: TokenSequence, mask_token: torch.Tensor) -> torch.Tensor:
    """Dense ``(..., L, D)`` sequence with every invalid token replaced by ``mask_token``."""
    if mask_token.shape != t.tokens.shape[-1:]:
        raise ShapeError(
            f"mask token has shape {tuple(mask_token.shape)}, tokens have dim {t.tokens.shape[-1]}"
        )
    return torch.where(t.token_mask.unsqueeze(-1), t.tokens, mask_token)


def pad_masked_tokens(
    t: TokenSequence, strategy: TokenPadding, mask_token: torch.Tensor | None = None
) -> torch.Tensor:
    """Fill invalid tokens by the chosen strategy.

    ``learned`` uses ``mask_token``; ``mean`` the mean of the valid tokens of
    each sequence; ``zero`` a zero vector.
    """
    if strategy == "learned":
        if mask_token is None:
            raise ValueError("learned padding needs a mask token")
        return substitute_masked_tokens(t, mask_token)
    m = t.token_mask.unsqueeze(-1)
    zero = torch.zeros((), dtype=t.tokens.dtype)
    if strategy == "zero":
        return torch.where(m, t.tokens, zero)
    if strategy == "mean":
        clean = torch.where(m, t.tokens, zero)
        count = t.token_mask.sum(-1, keepdim=True).clamp(min=1).to(t.tokens.dtype)
        mean = clean.sum(-2) / count
        return torch.where(m, t.tokens, mean.unsqueeze(-2))
    raise ValueError(f"unknown token padding strategy {strategy!r}")


class PatchMambaBlock(nn.Module):
    """Parameters of one (P)VM block over a ``channels x H x W`` feature map.

    ``patch`` pixels per side form a token of width ``dim``; the block output
    is projected back to ``channels * patch**2`` and reshaped to the map.
    """

    def __init__(
        self,
        channels: int,
        dim: int,
        patch: int = 1,
        expand: int = 2,
        state: int = 8,
        token_padding: TokenPadding = "learned",
        norm_before_substitution: bool = False,
        scan: ScanMode = "bidirectional",
        mask_token_std: float = 0.02,
    ):
        super().__init__()
        self.channels = channels
        self.patch = patch
        self.dim = dim
        self.token_padding = token_padding
        self.norm_before_substitution = norm_before_substitution
        self.scan = scan
        self.embed = nn.Linear(channels * patch * patch, dim)
        self.mask_token = nn.Parameter(torch.randn(dim) * mask_token_std)
        self.vm = VMBlock(dim, expand, state)
        self.recon = nn.Linear(dim, channels * patch * patch)


def _run_block(tokens: TokenSequence, block: PatchMambaBlock) -> torch.Tensor:
    if block.norm_before_substitution:
        normed = TokenSequence(block.vm.norm(tokens.tokens), tokens.token_mask)
        dense = pad_masked_tokens(normed, block.token_padding, block.mask_token)
        return vm_block(dense, block.vm, block.scan, prenorm=False)
    dense = pad_masked_tokens(tokens, block.token_padding, block.mask_token)
    return vm_block(dense, block.vm, block.scan)


def pvm_forward(x: MaskedTensor, block: PatchMambaBlock) -> MaskedTensor:
    """Non-residual PVM: sparse map in, dense fully-valid map out."""
    values, mask, squeeze = _as_batched(x)
    if not bool(mask.flatten(1).any(dim=1).all()):
        raise PreconditionError("PVM needs at least one valid pixel per sample")
    b, c, h, w = values.shape
    tokens = partial_patch_embed(MaskedTensor(values, mask, 2), block.embed.weight, block.embed.bias, block.patch)
    out = _run_block(tokens, block)
    fmap = unpatchify(block.recon(out), block.channels, block.patch, h, w)
    full = torch.ones(b, h, w, dtype=torch.bool)
    if squeeze:
        return MaskedTensor(fmap.squeeze(0), full.squeeze(0), 2)
    return MaskedTensor(fmap, full, 2)


def pvm_residual(x: MaskedTensor, block: PatchMambaBlock) -> MaskedTensor:
    """``x + PVM(x)`` kept only at the input's valid positions; the input mask is retained."""
    y = pvm_forward(x, block)
    return elementwise_combine(x, y, "add")


def vm_forward(x: MaskedTensor, block: PatchMambaBlock) -> MaskedTensor:
    """Mask-unaware baseline over ``x.values`` as given, with bookkeeping mask."""
    values, mask, squeeze = _as_batched(x)
    b, c, h, w = values.shape
    tokens = patch_embed(values, block.embed.weight, block.embed.bias, block.patch)
    out = vm_block(tokens, block.vm, block.scan)
    fmap = unpatchify(block.recon(out), block.channels, block.patch, h, w)
    _, pm = patchify(values, mask, block.patch)
    token_valid = propagate_dense(pm, ValidityRule.ALL_VALID, dim=(-2, -1))
    direction = "bidirectional" if block.scan == "bidirectional" else "forward"
    seq_valid = propagate_sequence(token_valid, direction, ValidityRule.ALL_VALID)
    out_mask = _token_mask_to_map(seq_valid, block.patch, h, w)
    if squeeze:
        return MaskedTensor(fmap.squeeze(0), out_mask.squeeze(0), 2)
    return MaskedTensor(fmap, out_mask, 2)


def vm_residual(x: MaskedTensor, block: PatchMambaBlock) -> MaskedTensor:
    """``x + VM(x)`` on raw values; the bookkeeping mask is the AND of both masks."""
    y = vm_forward(x, block)
    return MaskedTensor(x.values + y.values, x.mask & y.mask, 2)
