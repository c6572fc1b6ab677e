"""AdamW with decoupled weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


class AdamW:
    """AdamW over a fixed, ordered parameter list.

    Defaults follow the common framework defaults (beta1=0.9, beta2=0.999,
    eps=1e-8, weight_decay=0.01). ``step`` leaves gradients untouched.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.01, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = list(names) if names is not None else [p.name or f"param[{i}]" for i, p in enumerate(self.params)]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self) -> None:
        for p, name in zip(self.params, self.names):
            if p.grad is None:
                raise ContractError(f"AdamW.step: parameter {name!r} has no gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.lr == 0.0:
                continue
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(params: Sequence[Tensor], state: AdamW) -> None:
    """Functional form: apply one AdamW update of ``state`` to ``params``."""
    params = list(params)
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ContractError("adamw_step: parameter list does not match optimizer state")
    state.step()
