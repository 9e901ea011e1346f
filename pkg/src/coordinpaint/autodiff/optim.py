"""Adam optimizer over named parameter tables."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import MutableMapping

import numpy as np

from .tensor import Tensor


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update on plain arrays.

    ``params`` and ``grads`` map names to arrays of equal shape; missing
    gradients leave the parameter untouched. Returns new arrays and the
    advanced state; inputs are not mutated.
    """
    t = state.step + 1
    new_params, new_m, new_v = {}, dict(state.m), dict(state.v)
    b1, b2 = hyper.beta1, hyper.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new_params[name] = p
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step=t, m=new_m, v=new_v)


class Adam:
    """Stateful wrapper that swaps updated leaf tensors into a parameter table."""

    def __init__(self, table: MutableMapping[str, Tensor], hyper: AdamHyper | None = None):
        self.table = table
        self.hyper = hyper or AdamHyper()
        self.state = AdamState()

    def step(self) -> None:
        params = {k: t.data for k, t in self.table.items()}
        grads = {k: t.grad for k, t in self.table.items() if t.grad is not None}
        updated, self.state = adam_step(params, grads, self.state, self.hyper)
        for name, arr in updated.items():
            old = self.table[name]
            if arr is old.data:
                old.grad = None
                continue
            self.table[name] = Tensor(arr, requires_grad=old.requires_grad, dtype=old.dtype, name=name)

    def zero_grad(self) -> None:
        for t in self.table.values():
            t.grad = None
