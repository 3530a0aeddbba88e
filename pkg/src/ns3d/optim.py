"""Decoupled-weight-decay Adam and finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .errors import NumericError


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.05
    eps: float = 1e-8
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


@torch.no_grad()
def adamw_step(
    params: list[torch.Tensor], grads: list[torch.Tensor], state: OptimState
) -> OptimState:
    """One AdamW update, in place. Weight decay is decoupled from the moments."""
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient in adamw_step")
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        if state.weight_decay != 0.0:
            p.mul_(1.0 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-state.lr)
    return state


class AdamW:
    """Thin stateful wrapper around adamw_step for training loops."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.95), weight_decay=0.05):
        self.params = list(params)
        self.state = OptimState(
            lr=lr, beta1=betas[0], beta2=betas[1], weight_decay=weight_decay
        )

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = value

    def step(self) -> None:
        grads = [p.grad for p in self.params]
        adamw_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(f, params: list[torch.Tensor], eps: float = 1e-6, tol: float = 1e-4) -> float:
    """Max relative error between reverse-mode gradients and central differences.

    Meant to run in float64; float32 rounding drowns the eps**2 truncation term.
    """
    for p in params:
        p.requires_grad_(True)
        if p.grad is not None:
            p.grad = None
    out = f()
    if not torch.isfinite(out).all():
        raise NumericError("grad_check: non-finite function output")
    out.backward()
    worst = 0.0
    for p in params:
        g_ad = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            with torch.no_grad():
                hi = f().item()
            flat[i] = orig - eps
            with torch.no_grad():
                lo = f().item()
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            g_a = g_ad.view(-1)[i].item()
            rel = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
            worst = max(worst, rel)
    return worst
