"""Adam with bias correction, plus optional decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: Sequence[Tensor], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              weight_decay: float = 0.0) -> None:
    """One Adam update in place. A ``None`` gradient is treated as zero.

    ``weight_decay`` shrinks each parameter by ``lr * weight_decay * param``
    alongside the Adam step (decoupled from the moment estimates).
    """
    if len(params) != len(state.m) or len(grads) != len(params):
        raise ContractError("params, grads and Adam state differ in length")
    if state.learning_rate <= 0:
        raise ContractError("learning rate must be positive")
    state.step_count += 1
    t = state.step_count
    b1, b2, lr = state.beta1, state.beta2, state.learning_rate
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ContractError(f"gradient/moment shape mismatch for parameter of shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= update
