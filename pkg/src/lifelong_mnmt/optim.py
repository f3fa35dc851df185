"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn


@dataclass
class OptimizerState:
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``peak_lr`` then decay proportional to 1/sqrt(step)."""
        step = max(step, 1)
        return self.peak_lr * min(step / self.warmup_steps, math.sqrt(self.warmup_steps / step))

    def hyper(self) -> dict:
        return {
            "peak_lr": self.peak_lr,
            "warmup_steps": self.warmup_steps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
        }


def init_optimizer(model: nn.Module, **hyper) -> OptimizerState:
    opt = OptimizerState(**hyper)
    for name, p in model.named_parameters():
        opt.exp_avg[name] = torch.zeros_like(p)
        opt.exp_avg_sq[name] = torch.zeros_like(p)
    return opt


@torch.no_grad()
def apply_update(model: nn.Module, grads: dict[str, Tensor], opt: OptimizerState) -> float:
    """One bias-corrected Adam step in place; returns the learning rate used."""
    params = dict(model.named_parameters())
    if set(grads) != set(params) or set(opt.exp_avg) != set(params):
        raise ValueError("gradient/optimizer names do not match model parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape or opt.exp_avg[name].shape != g.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(g.shape)} vs {tuple(params[name].shape)}")
    opt.step += 1
    lr = opt.lr_at(opt.step)
    bc1 = 1 - opt.beta1**opt.step
    bc2 = 1 - opt.beta2**opt.step
    for name, p in params.items():
        g = grads[name]
        m, v = opt.exp_avg[name], opt.exp_avg_sq[name]
        m.mul_(opt.beta1).add_(g, alpha=1 - opt.beta1)
        v.mul_(opt.beta2).addcmul_(g, g, value=1 - opt.beta2)
        denom = (v / bc2).sqrt_().add_(opt.eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    for name, p in params.items():
        if not torch.isfinite(p).all():
            raise FloatingPointError(f"non-finite values in parameter {name} after step {opt.step}")
    return lr
