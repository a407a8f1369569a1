"""Gradients, finite-difference verification and the Adam optimizer.

Reverse-mode differentiation is delegated to ``torch.autograd``: every forward
pass records its primitives on the autograd graph, which plays the role of the
tape.  Masks and mask-derived routing are plain boolean tensors and therefore
never receive gradients.  Primitives with hand-written backward passes (the
selective scan) live next to their forward code and are verified here with
central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import torch

from .errors import DetachedParameterError, NumericError, PreconditionError, ShapeError

__all__ = ["backward", "grad_check", "GradCheckResult", "Adam", "adam_step", "AdamState"]


def _named(params) -> dict[str, torch.Tensor]:
    if isinstance(params, torch.nn.Module):
        return dict(params.named_parameters())
    if isinstance(params, Mapping):
        return dict(params)
    return {str(i): p for i, p in enumerate(params)}


def backward(loss: torch.Tensor, params, allow_unused: bool = False) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` with respect to every named parameter.

    Raises :class:`DetachedParameterError` when a parameter is not on the
    loss graph, so silently untrained weights are caught early.  With
    ``allow_unused`` such parameters get a zero gradient instead (a model
    variant that bypasses some weights, e.g. the mask token of a baseline).
    """
    if loss.numel() != 1:
        raise ShapeError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    named = _named(params)
    names = list(named)
    for n in names:
        if not named[n].requires_grad:
            raise DetachedParameterError(f"parameter {n!r} does not require grad")
    grads = torch.autograd.grad(loss.reshape(()), [named[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        if g is None and allow_unused:
            g = torch.zeros_like(named[n])
        elif g is None:
            raise DetachedParameterError(f"parameter {n!r} does not reach the loss")
        out[n] = g
    return out


@dataclass
class GradCheckResult:
    max_rel_error: float
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-6,
    floor: float = 1e-6,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
) -> GradCheckResult:
    """Compare tape gradients with central differences.

    ``f`` rebuilds the forward pass from scratch and returns a scalar.  The
    per-entry error is ``|a - n| / max(|a|, |n|, floor)``; the worst entry is
    reported.  ``max_entries`` subsamples entries per tensor for large models.
    """
    named = dict(params)
    for n, p in named.items():
        if p.dtype != torch.float64:
            raise PreconditionError(f"grad_check needs float64 tensors; {n!r} is {p.dtype}")
    loss = f()
    if not torch.isfinite(loss).all():
        raise NumericError("loss is not finite at the base point")
    analytic = backward(loss, named)
    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, 0)
    checked = 0
    with torch.no_grad():
        for n, p in named.items():
            flat = p.view(-1)
            idx: Iterable[int] = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries].tolist()
            ga = analytic[n].reshape(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                a = ga[i].item()
                if not (torch.isfinite(torch.tensor([up, down, a])).all()):
                    raise NumericError(f"non-finite value while checking {n}[{i}]")
                err = abs(a - num) / max(abs(a), abs(num), floor)
                checked += 1
                if err > worst.max_rel_error or not worst.name:
                    pos = tuple(int(v) for v in torch.unravel_index(torch.tensor(i), p.shape))
                    worst = GradCheckResult(err, n, pos, a, num, 0)
    worst.checked = checked
    return worst


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> AdamState:
    """One in-place Adam update with bias correction."""
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for n, p in params.items():
            g = grads[n]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {n!r} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
            if n not in state.m:
                state.m[n] = torch.zeros_like(p)
                state.v[n] = torch.zeros_like(p)
            m, v = state.m[n], state.v[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            denom = (v / c2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / c1)
    return state


class Adam:
    """Thin stateful wrapper over :func:`adam_step` for a module's parameters."""

    def __init__(
        self,
        module: torch.nn.Module,
        lr: float = 1e-3,
        betas=(0.9, 0.999),
        eps=1e-8,
        grad_clip: float | None = None,
    ):
        self.params = {n: p for n, p in module.named_parameters() if p.requires_grad}
        self.lr = lr
        self.grad_clip = grad_clip
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self, loss: torch.Tensor) -> dict[str, torch.Tensor]:
        grads = backward(loss, self.params, allow_unused=True)
        if self.grad_clip:
            norm = torch.sqrt(sum((g.double() ** 2).sum() for g in grads.values()))
            if norm > self.grad_clip:
                scale = float(self.grad_clip / norm)
                grads = {n: g * scale for n, g in grads.items()}
        adam_step(self.params, grads, self.state, self.lr, self.betas, self.eps)
        return grads
