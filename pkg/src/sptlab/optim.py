"""Optimizer machinery: warmup-cosine schedule, AdamW, and EMA updates."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["lr_at", "AdamWState", "adamw_init", "adamw_step", "ema_update", "OptimizerError"]


class OptimizerError(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, warmup_frac: float, lr_max: float, lr_min: float) -> float:
    """Learning rate at an integer step in [0, total_steps].

    Linear 0 -> lr_max over the first ceil(warmup_frac * total_steps) steps,
    then cosine decay lr_max -> lr_min over the remainder.
    """
    if not 0 <= step <= total_steps:
        raise OptimizerError(f"step {step} outside [0, {total_steps}]")
    warmup = min(math.ceil(warmup_frac * total_steps), max(total_steps - 1, 0))
    if step < warmup:
        return lr_max * step / warmup
    span = total_steps - warmup
    progress = (step - warmup) / span if span > 0 else 1.0
    return lr_min + (lr_max - lr_min) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """First/second moment tensors plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def adamw_init(params: dict[str, np.ndarray]) -> AdamWState:
    return AdamWState(
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
        step=0,
    )


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: AdamWState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One decoupled-weight-decay Adam update, in place.

    Decay is applied separately from the gradient step (theta *= 1 - lr*wd),
    then the bias-corrected moment update.  Non-finite gradients abort with
    the offending parameter named.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r} at step {t}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay != 0.0:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def ema_update(target: dict[str, np.ndarray], online: dict[str, np.ndarray],
               momentum: float) -> None:
    """target <- momentum * target + (1 - momentum) * online, every tensor."""
    if not 0.0 <= momentum < 1.0:
        raise OptimizerError(f"momentum must lie in [0, 1), got {momentum}")
    for name, t in target.items():
        t *= momentum
        t += (1.0 - momentum) * online[name]
