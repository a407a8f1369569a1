"""Mask-aware (partial) operators and their mask-unaware counterparts.

Functional API in the style of ``torch.nn.functional``: weights are passed
explicitly, masked inputs are :class:`~pvm.tensor.MaskedTensor` with values of
shape ``(B, C, H, W)`` (or unbatched ``(C, H, W)``) and masks ``(B, H, W)``.

Partial operators only ever read values at valid positions (selection uses
``torch.where``, so even non-finite placeholders cannot leak), and write exact
zeros wherever their output mask is 0.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import FillError, PreconditionError, ShapeError
from .masks import KernelFootprint, ValidityRule, propagate_receptive_field, window_counts
from .tensor import MaskedTensor, TokenSequence

__all__ = [
    "pconv2d",
    "std_conv2d_masked",
    "partial_linear",
    "partial_avg_pool2d",
    "partial_global_pool",
    "fill_until_valid",
]


def _batched(x: MaskedTensor) -> tuple[torch.Tensor, torch.Tensor, bool]:
    if x.spatial_ndim != 2:
        raise ShapeError("expected a channel-first 2-D feature map")
    if x.values.dim() == 3:
        return x.values.unsqueeze(0), x.mask.unsqueeze(0), True
    if x.values.dim() == 4:
        return x.values, x.mask, False
    raise ShapeError(f"expected (C, H, W) or (B, C, H, W) values, got {tuple(x.values.shape)}")


def _unbatch(v: torch.Tensor, m: torch.Tensor, squeeze: bool) -> MaskedTensor:
    if squeeze:
        v, m = v.squeeze(0), m.squeeze(0)
    return MaskedTensor(v, m, 2)


def _check_conv(values: torch.Tensor, weight: torch.Tensor, bias) -> None:
    if weight.dim() != 4:
        raise ShapeError(f"conv weight must be K x C x kh x kw, got {tuple(weight.shape)}")
    if values.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input has {values.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {tuple(bias.shape)} does not match {weight.shape[0]} filters")


def _zero(values: torch.Tensor) -> torch.Tensor:
    return torch.zeros((), dtype=values.dtype)


def pconv2d(
    x: MaskedTensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> MaskedTensor:
    """Partial convolution with a channel-shared mask.

    ``y = W * (x . m) * (window_size / valid_count) + b`` wherever the window
    holds at least one valid pixel; fully invalid windows give 0 and mask 0.
    """
    values, mask, squeeze = _batched(x)
    _check_conv(values, weight, bias)
    fp = KernelFootprint(weight.shape[2], weight.shape[3], stride, padding)
    counts = window_counts(mask, fp)
    clean = torch.where(mask.unsqueeze(1), values, _zero(values))
    raw = F.conv2d(clean, weight, None, stride=stride, padding=padding)
    valid = counts > 0
    ratio = (fp.window_size / counts.clamp(min=1.0)).to(values.dtype).unsqueeze(1)
    out = raw * ratio
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    out = torch.where(valid.unsqueeze(1), out, _zero(out))
    return _unbatch(out, valid, squeeze)


def std_conv2d_masked(
    x: MaskedTensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> MaskedTensor:
    """Standard convolution with honest (eroding) mask bookkeeping.

    The op is mask-unaware: it convolves ``x.values`` exactly as given, so the
    placeholders stored at invalid positions (zeros for library tensors) feed
    the result.  The returned mask marks outputs whose window touched any
    invalid input; values there are left as computed.
    """
    values, mask, squeeze = _batched(x)
    _check_conv(values, weight, bias)
    fp = KernelFootprint(weight.shape[2], weight.shape[3], stride, padding)
    # bias added separately so all-valid outputs match pconv2d bit for bit
    out = F.conv2d(values, weight, None, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    out_mask = propagate_receptive_field(mask, fp, ValidityRule.ALL_VALID)
    return _unbatch(out, out_mask, squeeze)


def partial_linear(
    x_patch: MaskedTensor, weight: torch.Tensor, bias: torch.Tensor | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Linear projection of a patch after per-channel mean padding.

    ``x_patch`` has values ``(..., C, *spatial)`` and mask ``(..., *spatial)``.
    Invalid positions are replaced by the mean of the valid values of the same
    channel inside the patch, then the flattened ``C * prod(spatial)`` vector
    goes through a plain linear layer.  Patches with no valid pixel give a zero
    token and a 0 validity bit.
    """
    k = x_patch.spatial_ndim
    if k is None:
        raise ShapeError("partial_linear needs a channel axis")
    values = x_patch.values.flatten(-k)  # (..., C, S)
    mask = x_patch.mask.flatten(-k).unsqueeze(-2)  # (..., 1, S)
    if weight.shape[-1] != values.shape[-2] * values.shape[-1]:
        raise ShapeError(
            f"linear weight expects {weight.shape[-1]} inputs, patch has "
            f"{values.shape[-2] * values.shape[-1]}"
        )
    zero = _zero(values)
    clean = torch.where(mask, values, zero)
    count = mask.sum(-1, keepdim=True)
    mean = clean.sum(-1, keepdim=True) / count.clamp(min=1).to(values.dtype)
    filled = torch.where(mask, values, mean)
    token = F.linear(filled.flatten(-2), weight, bias)
    valid = count.squeeze(-1).squeeze(-1) > 0
    token = torch.where(valid.unsqueeze(-1), token, _zero(token))
    return token, valid


def partial_avg_pool2d(
    x: MaskedTensor, kernel: int, stride: int | None = None, padding: int = 0
) -> MaskedTensor:
    """Average over the valid entries of each window (any-valid mask rule)."""
    stride = kernel if stride is None else stride
    values, mask, squeeze = _batched(x)
    fp = KernelFootprint(kernel, kernel, stride, padding)
    counts = window_counts(mask, fp)
    clean = torch.where(mask.unsqueeze(1), values, _zero(values))
    sums = F.avg_pool2d(
        clean, kernel, stride, padding, count_include_pad=True, divisor_override=1
    )
    valid = counts > 0
    out = sums / counts.clamp(min=1.0).to(values.dtype).unsqueeze(1)
    out = torch.where(valid.unsqueeze(1), out, _zero(out))
    return _unbatch(out, valid, squeeze)


def partial_global_pool(t: TokenSequence) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean over valid tokens; returns ``(vector (..., D), valid (...,))``."""
    if t.length < 1:
        raise ShapeError("need at least one token")
    m = t.token_mask.unsqueeze(-1)
    clean = torch.where(m, t.tokens, _zero(t.tokens))
    count = t.token_mask.sum(-1, keepdim=True)
    vec = clean.sum(-2) / count.clamp(min=1).to(t.tokens.dtype)
    valid = count.squeeze(-1) > 0
    return vec, valid


def fill_until_valid(
    x: MaskedTensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    max_iters: int = 64,
) -> tuple[MaskedTensor, torch.Tensor]:
    """Apply one shared same-size partial convolution until the mask is all-ones.

    Each sample stops as soon as its own mask is complete; samples that are
    already fully valid are returned untouched.  Returns the filled map and the
    number of passes used per sample (0-d tensor for unbatched input).
    """
    kh, kw = weight.shape[-2:]
    if kh != kw or kh % 2 == 0:
        raise ShapeError("filling needs an odd square kernel")
    if weight.shape[0] != weight.shape[1]:
        raise ShapeError("filling kernel must preserve the channel count")
    values, mask, squeeze = _batched(x)
    if not bool(mask.flatten(1).any(dim=1).all()):
        raise PreconditionError("fill_until_valid needs at least one valid pixel per sample")
    iters = torch.zeros(values.shape[0], dtype=torch.long)
    # finished samples leave the working set; each keeps its own pass count
    rows = [None] * values.shape[0]
    idx = torch.arange(values.shape[0])
    cur = MaskedTensor(values, mask, 2)
    for _ in range(max_iters + 1):
        done = cur.mask.flatten(1).all(dim=1)
        for j in torch.nonzero(done).flatten().tolist():
            rows[int(idx[j])] = cur.values[j]
        if bool(done.all()):
            break
        if _ == max_iters:
            raise FillError(int((~cur.mask).sum()), max_iters)
        active = torch.nonzero(~done).flatten()
        if active.numel() < done.numel():
            cur = MaskedTensor(cur.values[active], cur.mask[active], 2)
            idx = idx[active]
        cur = pconv2d(cur, weight, bias, stride=1, padding=kh // 2)
        iters[idx] += 1
    filled = torch.stack(rows)
    full = torch.ones(filled.shape[0], *filled.shape[2:], dtype=torch.bool)
    out = _unbatch(filled, full, squeeze)
    return out, (iters.squeeze(0) if squeeze else iters)
