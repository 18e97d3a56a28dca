"""AdamW with decoupled weight decay, and a one-cycle cosine LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .autodiff import Parameter
from .errors import NonFiniteGradient


@dataclass
class AdamWState:
    """Per-parameter first/second moment estimates plus the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def create(cls, params: Sequence[Parameter]) -> "AdamWState":
        return cls(
            m={p.name: np.zeros_like(p.value.data) for p in params},
            v={p.name: np.zeros_like(p.value.data) for p in params},
        )


def adamw_step(
    params: Sequence[Parameter],
    state: AdamWState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    grads: Optional[Dict[str, np.ndarray]] = None,
) -> None:
    """One in-place update; gradients default to each parameter's grad slot.

    Weight decay is decoupled: p <- p*(1 - lr*wd) before the Adam update,
    so a zero gradient with zero decay leaves parameters untouched.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p in params:
        if not p.trainable:
            continue
        g = p.value.grad if grads is None else grads[p.name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {p.name!r}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.value.data *= 1.0 - lr * weight_decay
        p.value.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + eps)


def onecycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    pct_start: float = 0.3,
    div_factor: float = 25.0,
    final_div: float = 1e4,
) -> float:
    """One-cycle schedule with cosine annealing in both phases.

    Warms up from max_lr/div_factor to max_lr over pct_start*total_steps,
    then anneals down to max_lr/final_div at step == total_steps.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    initial = max_lr / div_factor
    final = max_lr / final_div
    warmup_steps = pct_start * total_steps
    if step <= warmup_steps:
        t = step / warmup_steps if warmup_steps > 0 else 1.0
        return initial + (max_lr - initial) * 0.5 * (1.0 - math.cos(math.pi * t))
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return final + (max_lr - final) * 0.5 * (1.0 + math.cos(math.pi * t))
