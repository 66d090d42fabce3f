"""Adam / AdamW with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import DTYPE, Tensor


class MissingGradError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 3e-4
    beta1: float = 0.5
    beta2: float = 0.9
    weight_decay: float = 0.0
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict, repr=False)
    second_moment: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def adam(lr=3e-4, beta1=0.5, beta2=0.9) -> OptimizerState:
    return OptimizerState("adam", lr, beta1, beta2, 0.0)


def adamw(lr=2e-4, beta1=0.5, beta2=0.9, weight_decay=1e-2) -> OptimizerState:
    return OptimizerState("adamw", lr, beta1, beta2, weight_decay)


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """One update of every parameter in ``params``; grads are cleared afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise MissingGradError(f"parameter {p.name or i} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p in params:
        key = id(p)
        m = state.first_moment.get(key)
        if m is None:
            m = state.first_moment[key] = np.zeros_like(p.data)
            state.second_moment[key] = np.zeros_like(p.data)
        v = state.second_moment[key]
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if state.kind == "adamw" and state.weight_decay:
            p.data *= DTYPE(1.0 - lr * state.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(DTYPE)
        p.grad = None


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
