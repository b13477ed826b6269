"""Gradient plumbing, a finite-difference oracle, AdamW and the LR schedule.

Tensors are ``torch.Tensor``; reverse-mode differentiation is torch autograd.
Everything that verifies it (``finite_diff_grad``) is written independently
against plain float64 evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import torch


class Divergence(RuntimeError):
    """Raised when a loss or gradient is non-finite."""


class GraphConsumed(RuntimeError):
    pass


def backward(loss: torch.Tensor, params: Sequence[torch.Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    The graph is freed afterwards; a second call on the same loss raises
    ``GraphConsumed``.
    """
    if loss.dim() != 0:
        raise ValueError(f"backward expects a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced by a recorded computation")
    if getattr(loss, "_dprag_consumed", False):
        raise GraphConsumed("graph already consumed by a previous backward()")
    if not torch.isfinite(loss.detach()):
        raise Divergence(f"non-finite loss {loss.item()}")
    if params is None:
        loss.backward()
    else:
        grads = torch.autograd.grad(loss, list(params), allow_unused=True)
        for p, g in zip(params, grads):
            if g is None:
                continue
            p.grad = g if p.grad is None else p.grad + g
    loss._dprag_consumed = True


def finite_diff_grad(
    f: Callable[[torch.Tensor], float | torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Central-difference gradient of scalar ``f`` at ``params`` (any shape)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = params.detach().clone().to(torch.float64)
    flat = p.view(-1)
    out = torch.zeros_like(flat)

    def _eval() -> float:
        with torch.no_grad():
            v = f(p)
        v = float(v)
        if not math.isfinite(v):
            raise Divergence("non-finite function value during finite differencing")
        return v

    for k in range(flat.numel()):
        orig = flat[k].item()
        flat[k] = orig + eps
        up = _eval()
        flat[k] = orig - eps
        down = _eval()
        flat[k] = orig
        out[k] = (up - down) / (2.0 * eps)
    return out.view(params.shape)


def max_rel_error(a: torch.Tensor, b: torch.Tensor, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise."""
    a = a.detach().to(torch.float64)
    b = b.detach().to(torch.float64)
    denom = torch.maximum(torch.maximum(a.abs(), b.abs()), torch.full_like(a, floor))
    return float(((a - b).abs() / denom).max()) if a.numel() else 0.0


@dataclass
class LrSchedule:
    total_steps: int
    base_lr: float = 1e-4
    end_lr: float = 1e-6
    warmup_fraction: float = 0.10
    power: float = 1.0

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_fraction * self.total_steps))


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear warm-up from 0 to ``base_lr``, then polynomial decay to ``end_lr``."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if w > 0 and step < w:
        return schedule.base_lr * step / w
    span = schedule.total_steps - w
    if span <= 0:
        return schedule.end_lr if step >= schedule.total_steps else schedule.base_lr
    remaining = 1.0 - (step - w) / span
    return (schedule.base_lr - schedule.end_lr) * remaining**schedule.power + schedule.end_lr


@dataclass
class OptimState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def adamw_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: OptimState,
    lr: float | None = None,
) -> OptimState:
    """One in-place AdamW update. ``lr`` overrides ``state.lr`` (scheduler hook).

    Raises ``Divergence`` without touching anything if a gradient is non-finite.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if g is not None and not torch.isfinite(g).all():
            raise Divergence("non-finite gradient; step rejected")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if p.shape != m.shape:
            raise ValueError("moment buffer shape mismatch")
        if g is not None:
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if lr == 0.0:
            continue
        # decoupled decay uses the pre-update weights
        if state.weight_decay:
            p.mul_(1.0 - lr * state.weight_decay)
        if g is None:
            continue
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return state


class AdamW:
    """Thin stateful wrapper around ``adamw_step`` driven by an ``LrSchedule``."""

    def __init__(
        self,
        params: Iterable[torch.Tensor],
        schedule: LrSchedule | None = None,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = [p for p in params if p.requires_grad]
        self.schedule = schedule
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        self.rejected = 0

    def current_lr(self) -> float:
        if self.schedule is None:
            return self.state.lr
        return lr_at(self.schedule, min(self.state.step, self.schedule.total_steps))

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        """Apply one update; returns the lr used. Divergent steps are skipped."""
        lr = self.current_lr()
        try:
            adamw_step(self.params, [p.grad for p in self.params], self.state, lr=lr)
        except Divergence:
            self.rejected += 1
            raise
        return lr


def clip_grad_norm(params: Sequence[torch.Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.detach() ** 2).sum() for g in grads))
    if torch.isfinite(total) and total > max_norm:
        for g in grads:
            g.mul_(max_norm / (total + 1e-12))
    return float(total)
