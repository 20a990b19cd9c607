"""AdamW with decoupled weight decay and the warmup/cosine/floor schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


def lr_schedule(step: int, warmup_steps: int, peak: float, floor: float, decay_end: int) -> float:
    """Linear warmup 0 -> peak, cosine peak -> floor, then constant floor."""
    if warmup_steps >= decay_end:
        raise ContractError("lr_schedule: warmup_steps must be < decay_end")
    if step <= warmup_steps:
        return peak * step / warmup_steps if warmup_steps > 0 else peak
    if step >= decay_end:
        return floor
    frac = (step - warmup_steps) / (decay_end - warmup_steps)
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    lr: float = 0.0
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    decay_mask: list = field(default_factory=list)


class AdamW:
    """AdamW over a fixed list of parameter tensors.

    Weight decay only touches tensors with ndim >= 2 (matrices); gates,
    biases and vectors are left undecayed.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05, decay_mask=None):
        self.params: list[Tensor] = list(params)
        if decay_mask is None:
            decay_mask = [p.ndim >= 2 for p in self.params]
        self.state = AdamWState(
            beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
            m=[np.zeros_like(p.data) for p in self.params],
            v=[np.zeros_like(p.data) for p in self.params],
            decay_mask=list(decay_mask),
        )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self, lr: float) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state, lr)


def adamw_step(params, grads, state: AdamWState, lr: float) -> None:
    """One in-place AdamW update of ``params``."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("adamw_step: params/grads/state length mismatch")
    state.step += 1
    state.lr = lr
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape or state.m[i].shape != p.data.shape:
            raise ContractError(f"adamw_step: shape mismatch for param {i}: {p.data.shape} vs {g.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.decay_mask[i] and state.weight_decay:
            p.data *= 1.0 - lr * state.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
