from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from src.autodiff import Tensor
from src.errors import ContractError


@dataclass
class AdamState:
    """Per-parameter Adam moments. Weight decay is coupled (added to the raw gradient)."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: Optional[np.ndarray] = field(default=None, repr=False)
    v: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.lr}")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ContractError(f"betas must lie in (0,1), got {self.beta1}, {self.beta2}")
        if self.weight_decay < 0:
            raise ContractError(f"weight decay must be >= 0, got {self.weight_decay}")


def adam_step(param: Tensor, state: AdamState) -> None:
    if param.grad is None:
        raise ContractError(f"adam_step on parameter without gradient ({param.name or 'unnamed'})")
    grad = param.grad
    if state.weight_decay:
        grad = grad + state.weight_decay * param.data
    if state.m is None or state.v is None:
        state.m = np.zeros_like(param.data)
        state.v = np.zeros_like(param.data)
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    param.grad[...] = 0.0


class Adam:
    """Named-parameter Adam; moments persist per name across task segments."""

    def __init__(
        self,
        lr: float = 0.001,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.states: Dict[str, AdamState] = {}

    def state_for(self, name: str) -> AdamState:
        state = self.states.get(name)
        if state is None:
            state = AdamState(
                lr=self.lr,
                beta1=self.beta1,
                beta2=self.beta2,
                epsilon=self.epsilon,
                weight_decay=self.weight_decay,
            )
            self.states[name] = state
        return state

    def configure(self, lr: float, weight_decay: float) -> None:
        self.lr = lr
        self.weight_decay = weight_decay
        for state in self.states.values():
            state.lr = lr
            state.weight_decay = weight_decay

    def zero_grad(self, params: Mapping[str, Tensor]) -> None:
        # None marca "no alcanzado por backward"; `step` lo usa para saltar el parámetro
        for p in params.values():
            p.grad = None

    def step(self, params: Mapping[str, Tensor]) -> List[str]:
        """Update every parameter the last backward reached; returns the skipped names.

        A parameter outside this step's loss graph keeps its value and its moments,
        even when earlier segments left momentum or weight decay is on.
        """
        skipped: List[str] = []
        for name in sorted(params):
            param = params[name]
            if param.grad is None:
                skipped.append(name)
                continue
            adam_step(param, self.state_for(name))
            param.grad = None
        return skipped
