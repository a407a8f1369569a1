"""Validity-mask propagation rules.

Standard (mask-unaware) operators use :attr:`ValidityRule.ALL_VALID`: an output
is valid only when every input it reads is valid, which on a 2-D grid is a
morphological erosion.  Partial operators use :attr:`ValidityRule.ANY_VALID`
(dilation).  Zero padding always counts as invalid.

``oracle_receptive_field`` enumerates every kernel tap with explicit invalid
padding, independent of the convolution-count fast path it checks.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .errors import PreconditionError, ShapeError

__all__ = [
    "ValidityRule",
    "KernelFootprint",
    "window_counts",
    "propagate_receptive_field",
    "propagate_dense",
    "propagate_sequence",
    "oracle_receptive_field",
]

Direction = Literal["forward", "backward", "bidirectional"]


class ValidityRule(enum.Enum):
    ALL_VALID = "all_valid"
    ANY_VALID = "any_valid"


@dataclass(frozen=True)
class KernelFootprint:
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kernel_h < 1 or self.kernel_w < 1:
            raise ValueError("kernel sizes must be positive")
        if self.stride < 1:
            raise ValueError("stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")

    @classmethod
    def square(cls, kernel: int, stride: int = 1, padding: int = 0) -> "KernelFootprint":
        return cls(kernel, kernel, stride, padding)

    @property
    def window_size(self) -> int:
        return self.kernel_h * self.kernel_w

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h + 2 * self.padding < self.kernel_h or w + 2 * self.padding < self.kernel_w:
            raise ShapeError(
                f"footprint {self.kernel_h}x{self.kernel_w} (padding {self.padding}) "
                f"is larger than the padded {h}x{w} input"
            )
        return oh, ow


def _as_batch(m: torch.Tensor) -> tuple[torch.Tensor, tuple[int, ...]]:
    if m.dim() < 2:
        raise ShapeError("spatial masks need at least two dimensions")
    lead = tuple(m.shape[:-2])
    return m.reshape((-1, 1) + tuple(m.shape[-2:])), lead


def window_counts(m: torch.Tensor, fp: KernelFootprint) -> torch.Tensor:
    """Number of valid inputs under each output window, shape ``(..., oh, ow)``."""
    h, w = m.shape[-2:]
    oh, ow = fp.output_size(h, w)
    mb, lead = _as_batch(m)
    ones = torch.ones(1, 1, fp.kernel_h, fp.kernel_w, dtype=torch.float64)
    counts = F.conv2d(mb.to(torch.float64), ones, stride=fp.stride, padding=fp.padding)
    return counts.reshape(lead + (oh, ow))


def propagate_receptive_field(
    m: torch.Tensor, fp: KernelFootprint, rule: ValidityRule
) -> torch.Tensor:
    counts = window_counts(m, fp)
    if rule is ValidityRule.ALL_VALID:
        return counts == fp.window_size
    return counts > 0


def propagate_dense(m_in: torch.Tensor, rule: ValidityRule, dim=None) -> torch.Tensor:
    """Validity of a fully-connected output that reads every element of ``m_in``.

    ``dim`` selects the reduced axes (all axes by default) so a batch of
    patches can be handled in one call.
    """
    if m_in.numel() == 0:
        raise ShapeError("dense rule needs a non-empty mask")
    m_in = m_in.to(torch.bool)
    if rule is ValidityRule.ALL_VALID:
        return m_in.all() if dim is None else m_in.all(dim=dim)
    return m_in.any() if dim is None else m_in.any(dim=dim)


def propagate_sequence(
    m_token: torch.Tensor, direction: Direction, rule: ValidityRule
) -> torch.Tensor:
    """Apply ``rule`` over each position's scan history (last axis is time).

    Forward history is the prefix up to and including ``t``, backward the
    suffix; bidirectional history is the whole sequence.
    """
    if m_token.dim() == 0 or m_token.shape[-1] == 0:
        raise ShapeError("sequence rule needs L >= 1")
    m = m_token.to(torch.uint8)
    if direction == "bidirectional":
        full = propagate_dense(m_token, rule, dim=-1).unsqueeze(-1)
        return full.expand(m_token.shape).clone()
    if direction == "backward":
        m = m.flip(-1)
    if rule is ValidityRule.ALL_VALID:
        out = torch.cummin(m, dim=-1).values
    else:
        out = torch.cummax(m, dim=-1).values
    if direction == "backward":
        out = out.flip(-1)
    elif direction != "forward":
        raise ValueError(f"unknown scan direction {direction!r}")
    return out.to(torch.bool)


def oracle_receptive_field(m, fp: KernelFootprint, rule: ValidityRule) -> np.ndarray:
    """Reference implementation: visit every tap of every output window.

    The input is surrounded by an explicit invalid border, then each kernel
    tap contributes the strided slice of pixels it sees across all windows.
    """
    arr = np.asarray(m.cpu().numpy() if hasattr(m, "cpu") else m, dtype=bool)
    if arr.ndim != 2:
        raise ShapeError("oracle takes a single 2-D mask")
    h, w = arr.shape
    oh, ow = fp.output_size(h, w)
    p = fp.padding
    padded = np.zeros((h + 2 * p, w + 2 * p), dtype=bool)
    padded[p : p + h, p : p + w] = arr
    all_valid = np.ones((oh, ow), dtype=bool)
    any_valid = np.zeros((oh, ow), dtype=bool)
    for di in range(fp.kernel_h):
        for dj in range(fp.kernel_w):
            tap = padded[
                di : di + fp.stride * (oh - 1) + 1 : fp.stride,
                dj : dj + fp.stride * (ow - 1) + 1 : fp.stride,
            ]
            all_valid &= tap
            any_valid |= tap
    return all_valid if rule is ValidityRule.ALL_VALID else any_valid


def chebyshev_fill_bound(m, kernel: int) -> int:
    """Upper bound on partial-conv filling passes for a same-padded odd kernel.

    Each pass dilates the mask by ``kernel // 2`` in Chebyshev distance, so the
    number of passes is the largest distance from an invalid pixel to its
    nearest valid pixel divided by that radius, rounded up.
    """
    arr = np.asarray(m.cpu().numpy() if hasattr(m, "cpu") else m, dtype=bool)
    if not arr.any():
        raise PreconditionError("mask has no valid pixel")
    radius = kernel // 2
    vi, vj = np.nonzero(arr)
    ii, jj = np.nonzero(~arr)
    if ii.size == 0:
        return 0
    worst = 0
    # chunked to bound memory on large maps
    for s in range(0, ii.size, 4096):
        di = np.abs(ii[s : s + 4096, None] - vi[None, :])
        dj = np.abs(jj[s : s + 4096, None] - vj[None, :])
        worst = max(worst, int(np.maximum(di, dj).min(axis=1).max()))
    return math.ceil(worst / radius)
