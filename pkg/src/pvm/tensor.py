"""Masked tensors and the structural mask-bookkeeping operations.

A :class:`MaskedTensor` pairs a dense ``values`` tensor with a boolean
``mask`` that marks which positions carry real data.  Masks never carry a
channel axis: for a feature map of shape ``(..., C, H, W)`` the mask has shape
``(..., H, W)`` and is shared by all channels.  A mask with exactly the shape
of ``values`` (no channel axis at all) is also accepted.

Every mask-aware operation in the library writes exact zeros at the positions
its output mask declares invalid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import torch

from .errors import ShapeError

__all__ = [
    "MaskedTensor",
    "TokenSequence",
    "elementwise_combine",
    "concat_channels",
    "reshape_masked",
]


def _infer_spatial_ndim(values_shape: torch.Size, mask_shape: torch.Size) -> int | None:
    if values_shape == mask_shape:
        return None
    nd = len(values_shape)
    # prefer channel-first maps (C, H, W), then token layouts (C, L)
    for k in (2, 1, 3):
        if k + 1 > nd:
            continue
        stripped = values_shape[: nd - k - 1] + values_shape[nd - k :]
        if stripped == mask_shape:
            return k
    raise ShapeError(
        f"mask shape {tuple(mask_shape)} does not match values shape {tuple(values_shape)} "
        "with or without a channel axis"
    )


@dataclass(frozen=True)
class MaskedTensor:
    """Dense values plus a boolean validity mask.

    ``spatial_ndim`` is the number of trailing masked axes that follow the
    channel axis; ``None`` means the mask has the exact shape of ``values``.
    It is inferred when not given.
    """

    values: torch.Tensor
    mask: torch.Tensor
    spatial_ndim: int | None = -1  # -1: infer

    def __post_init__(self) -> None:
        mask = self.mask
        if mask.dtype != torch.bool:
            if not bool(((mask == 0) | (mask == 1)).all()):
                raise ShapeError("mask entries must be exactly 0 or 1")
            object.__setattr__(self, "mask", mask.to(torch.bool))
        if self.spatial_ndim == -1:
            object.__setattr__(
                self, "spatial_ndim", _infer_spatial_ndim(self.values.shape, self.mask.shape)
            )
        elif self.expanded_mask().dim() != self.values.dim():
            raise ShapeError("inconsistent spatial_ndim")

    @property
    def shape(self) -> torch.Size:
        return self.values.shape

    def expanded_mask(self) -> torch.Tensor:
        """Mask with a singleton channel axis inserted, broadcastable to ``values``."""
        if self.spatial_ndim is None:
            return self.mask
        return self.mask.unsqueeze(-self.spatial_ndim - 1)

    def zero_filled(self) -> torch.Tensor:
        return torch.where(self.expanded_mask(), self.values, torch.zeros((), dtype=self.values.dtype))

    def canonical(self) -> "MaskedTensor":
        """Same tensor with exact zeros at invalid positions."""
        return MaskedTensor(self.zero_filled(), self.mask, self.spatial_ndim)

    def with_placeholders(self, fill: torch.Tensor) -> "MaskedTensor":
        """Replace every invalid position by the matching entry of ``fill``."""
        out = torch.where(self.expanded_mask(), self.values, fill.to(self.values.dtype))
        return MaskedTensor(out, self.mask, self.spatial_ndim)

    def valid_count(self) -> int:
        return int(self.mask.sum())

    def to(self, dtype: torch.dtype) -> "MaskedTensor":
        return MaskedTensor(self.values.to(dtype), self.mask, self.spatial_ndim)


@dataclass(frozen=True)
class TokenSequence:
    """``tokens`` of shape ``(..., L, D)`` with a token mask of shape ``(..., L)``."""

    tokens: torch.Tensor
    token_mask: torch.Tensor

    def __post_init__(self) -> None:
        if self.tokens.shape[:-1] != self.token_mask.shape:
            raise ShapeError(
                f"token mask shape {tuple(self.token_mask.shape)} does not match "
                f"tokens shape {tuple(self.tokens.shape)}"
            )
        if self.token_mask.dtype != torch.bool:
            object.__setattr__(self, "token_mask", self.token_mask.to(torch.bool))

    @property
    def length(self) -> int:
        return self.tokens.shape[-2]


def elementwise_combine(
    a: MaskedTensor, b: MaskedTensor, op: Literal["add", "multiply"] = "add"
) -> MaskedTensor:
    if a.values.shape != b.values.shape or a.mask.shape != b.mask.shape:
        raise ShapeError(
            f"element-wise operands differ: {tuple(a.values.shape)} vs {tuple(b.values.shape)}"
        )
    if op == "add":
        raw = a.values + b.values
    elif op == "multiply":
        raw = a.values * b.values
    else:
        raise ValueError(f"unknown element-wise op {op!r}")
    return MaskedTensor(raw, a.mask & b.mask, a.spatial_ndim).canonical()


def concat_channels(parts: Sequence[MaskedTensor]) -> MaskedTensor:
    """Concatenate along the channel axis; the output mask is the AND of all part masks."""
    if not parts:
        raise ShapeError("cannot concatenate an empty list")
    first = parts[0]
    if first.spatial_ndim is None:
        raise ShapeError("concat_channels needs tensors with a channel axis")
    for p in parts[1:]:
        if p.mask.shape != first.mask.shape or p.spatial_ndim != first.spatial_ndim:
            raise ShapeError(
                f"spatial dims differ: {tuple(first.mask.shape)} vs {tuple(p.mask.shape)}"
            )
    mask = first.mask
    for p in parts[1:]:
        mask = mask & p.mask
    values = torch.cat([p.values for p in parts], dim=-first.spatial_ndim - 1)
    return MaskedTensor(values, mask, first.spatial_ndim).canonical()


def reshape_masked(x: MaskedTensor, new_dims: Sequence[int]) -> MaskedTensor:
    """Row-major reshape of the masked (spatial or token) axes.

    Leading and channel axes are kept; values and mask are reshaped with the
    same ordering so that mask bits follow their data.
    """
    new_dims = tuple(int(d) for d in new_dims)
    k = x.spatial_ndim if x.spatial_ndim is not None else x.values.dim()
    old = tuple(x.mask.shape[x.mask.dim() - k :])
    n_old = 1
    for d in old:
        n_old *= d
    n_new = 1
    for d in new_dims:
        n_new *= d
    if n_old != n_new:
        raise ShapeError(f"cannot reshape {old} ({n_old} elements) to {new_dims} ({n_new} elements)")
    lead_mask = tuple(x.mask.shape[: x.mask.dim() - k])
    lead_values = tuple(x.values.shape[: x.values.dim() - k])
    values = x.values.reshape(lead_values + new_dims)
    mask = x.mask.reshape(lead_mask + new_dims)
    spatial = None if x.spatial_ndim is None else len(new_dims)
    return MaskedTensor(values, mask, spatial)
