"""Minimal selective state-space scan and the gated Mamba-style block.

Discretization per channel ``e`` and state ``n``::

    delta_t = softplus(W_delta u_t + delta_bias)          (> 0)
    decay_t = exp(delta_t * A)                            A = -exp(A_log) < 0
    h_t     = decay_t * h_{t-1} + delta_t * B_t * u_t     B_t = W_B u_t
    y_t     = sum_n C_t[n] h_t[n] + D_skip * u_t          C_t = W_C u_t

The linear recurrence has a hand-written backward pass that runs the adjoint
recurrence in reverse time.
"""

from __future__ import annotations

import math
from typing import Literal

import torch
import torch.nn.functional as F
from torch import nn

from .errors import NumericError, ShapeError

__all__ = [
    "linear_recurrence",
    "discrete_scan",
    "selective_scan",
    "SSMParams",
    "VMBlock",
    "vm_block",
]

ScanMode = Literal["forward", "bidirectional"]


class _LinearRecurrence(torch.autograd.Function):
    """``h_t = a_t * h_{t-1} + b_t`` along dim 1 of ``(M, L, K)`` tensors, ``h_0 = 0``."""

    @staticmethod
    def forward(ctx, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        m, length, k = a.shape
        states = torch.empty_like(b)
        h = torch.zeros(m, k, dtype=b.dtype)
        for t in range(length):
            h = torch.addcmul(b[:, t], a[:, t], h)
            states[:, t] = h
        ctx.save_for_backward(a, states)
        return states

    @staticmethod
    def backward(ctx, grad_states: torch.Tensor):
        a, states = ctx.saved_tensors
        length = a.shape[1]
        # adjoint: g_t = dL/dh_t (total) = grad_t + a_{t+1} * g_{t+1}
        g_all = torch.empty_like(grad_states)
        g = grad_states[:, length - 1].clone()
        g_all[:, length - 1] = g
        for t in range(length - 2, -1, -1):
            g = torch.addcmul(grad_states[:, t], a[:, t + 1], g)
            g_all[:, t] = g
        grad_a = torch.zeros_like(a)
        grad_a[:, 1:] = g_all[:, 1:] * states[:, :-1]
        return grad_a, g_all


def linear_recurrence(decay: torch.Tensor, drive: torch.Tensor) -> torch.Tensor:
    """All hidden states of the diagonal recurrence; time is axis ``-3``.

    ``decay`` and ``drive`` have shape ``(..., L, E, N)``.
    """
    if decay.shape != drive.shape:
        raise ShapeError(f"decay {tuple(decay.shape)} and drive {tuple(drive.shape)} differ")
    shape = drive.shape
    length = shape[-3]
    a = decay.reshape(-1, length, shape[-2] * shape[-1])
    b = drive.reshape(-1, length, shape[-2] * shape[-1])
    return _LinearRecurrence.apply(a.contiguous(), b.contiguous()).reshape(shape)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite values in {what}")


def discrete_scan(
    u: torch.Tensor,
    decay: torch.Tensor,
    b_bar: torch.Tensor,
    c: torch.Tensor,
    d_skip: torch.Tensor | None = None,
    reverse: bool = False,
) -> torch.Tensor:
    """Scan with already-discretized coefficients.

    Shapes: ``u (..., L, E)``, ``decay`` and ``b_bar`` ``(..., L, E, N)``,
    ``c (..., L, N)``.  ``reverse`` runs the recurrence from the last token
    to the first.
    """
    if reverse:
        y = discrete_scan(u.flip(-2), decay.flip(-3), b_bar.flip(-3), c.flip(-2), d_skip)
        return y.flip(-2)
    states = linear_recurrence(decay, b_bar * u.unsqueeze(-1))
    y = torch.einsum("...len,...ln->...le", states, c)
    if d_skip is not None:
        y = y + d_skip * u
    return y


class SSMParams(nn.Module):
    """Selective-scan parameters over width ``E`` with ``N`` states per channel."""

    def __init__(self, width: int, state: int = 8, dt_min: float = 1e-3, dt_max: float = 0.1):
        super().__init__()
        self.width = width
        self.state = state
        a = torch.arange(1, state + 1, dtype=torch.float32).repeat(width, 1)
        self.A_log = nn.Parameter(torch.log(a))
        self.D_skip = nn.Parameter(torch.ones(width))
        bound = 1.0 / math.sqrt(width)
        self.W_B = nn.Parameter(torch.empty(state, width).uniform_(-bound, bound))
        self.W_C = nn.Parameter(torch.empty(state, width).uniform_(-bound, bound))
        self.W_delta = nn.Parameter(torch.empty(width, width).uniform_(-0.1 * bound, 0.1 * bound))
        dt = torch.exp(
            torch.rand(width) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        )
        # inverse softplus so that softplus(delta_bias) == dt at init
        self.delta_bias = nn.Parameter(dt + torch.log(-torch.expm1(-dt)))

    @property
    def A(self) -> torch.Tensor:
        return -torch.exp(self.A_log)


def selective_scan(
    u: torch.Tensor, p: SSMParams, direction: Literal["forward", "backward"] = "forward"
) -> torch.Tensor:
    """Input-dependent scan of ``u (..., L, E)``; returns ``(..., L, E)``."""
    if u.dim() < 2 or u.shape[-2] < 1:
        raise ShapeError("selective_scan needs at least one token")
    if u.shape[-1] != p.width:
        raise ShapeError(f"input width {u.shape[-1]} does not match scan width {p.width}")
    delta = F.softplus(F.linear(u, p.W_delta, p.delta_bias))
    b = F.linear(u, p.W_B)
    c = F.linear(u, p.W_C)
    decay = torch.exp(delta.unsqueeze(-1) * p.A)
    b_bar = delta.unsqueeze(-1) * b.unsqueeze(-2)
    y = discrete_scan(u, decay, b_bar, c, p.D_skip, reverse=(direction == "backward"))
    _check_finite(y, "selective scan output")
    return y


class VMBlock(nn.Module):
    """Pre-norm gated selective-scan block (no residual; callers add it)."""

    def __init__(self, dim: int, expand: int = 2, state: int = 8, zero_init_out: bool = False):
        super().__init__()
        if expand < 1:
            raise ValueError("expansion factor must be >= 1")
        inner = expand * dim
        self.dim = dim
        self.inner = inner
        self.norm = nn.LayerNorm(dim)
        self.in_proj = nn.Linear(dim, 2 * inner, bias=False)
        self.ssm_fwd = SSMParams(inner, state)
        self.ssm_bwd = SSMParams(inner, state)
        self.out_proj = nn.Linear(inner, dim, bias=False)
        if zero_init_out:
            nn.init.zeros_(self.out_proj.weight)

    def forward(self, t: torch.Tensor, scan: ScanMode = "bidirectional") -> torch.Tensor:
        return vm_block(t, self, scan)


def vm_block(
    t: torch.Tensor, p: VMBlock, scan: ScanMode = "bidirectional", prenorm: bool = True
) -> torch.Tensor:
    """normalize -> (stream, gate) -> scan(stream) * silu(gate) -> project back.

    ``prenorm=False`` skips the normalization for callers that already applied
    ``p.norm`` themselves.
    """
    if t.shape[-1] != p.dim:
        raise ShapeError(f"token dim {t.shape[-1]} does not match block dim {p.dim}")
    z = p.norm(t) if prenorm else t
    stream, gate = p.in_proj(z).chunk(2, dim=-1)
    y = selective_scan(stream, p.ssm_fwd, "forward")
    if scan == "bidirectional":
        y = y + selective_scan(stream, p.ssm_bwd, "backward")
    elif scan != "forward":
        raise ValueError(f"unknown scan mode {scan!r}")
    return p.out_proj(y * F.silu(gate))
