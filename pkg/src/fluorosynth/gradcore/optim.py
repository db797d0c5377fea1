"""Adamax (the infinity-norm variant of Adam)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


@dataclass
class AdamaxState:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-7
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    u: dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict[str, float]:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


def adamax_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamaxState,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], AdamaxState]:
    """One Adamax update.

    ``m <- b1 m + (1 - b1) g``, ``u <- max(b2 u, |g|)`` and
    ``theta <- theta - lr / (1 - b1**t) * m / (u + eps)``. Parameter arrays
    are not modified; new arrays are returned alongside the advanced state.
    ``lr`` overrides ``state.lr`` for this step (learning-rate schedules).
    """
    lr = state.lr if lr is None else lr
    t = state.t + 1
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_u: dict[str, np.ndarray] = {}
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {theta.shape}")
        dt = theta.dtype.type
        m = state.m.get(name)
        u = state.u.get(name)
        if m is None:
            m = np.zeros_like(theta)
            u = np.zeros_like(theta)
        m = dt(state.beta1) * m + dt(1.0 - state.beta1) * g
        u = np.maximum(dt(state.beta2) * u, np.abs(g))
        step_size = dt(lr / (1.0 - state.beta1**t))
        new_params[name] = theta - step_size * (m / (u + dt(state.epsilon)))
        new_m[name] = m.astype(theta.dtype, copy=False)
        new_u[name] = u.astype(theta.dtype, copy=False)
    new_state = AdamaxState(state.lr, state.beta1, state.beta2, state.epsilon, t, new_m, new_u)
    return new_params, new_state


class Adamax:
    """Stateful convenience wrapper around :func:`adamax_step`."""

    def __init__(self, lr=2e-4, beta1=0.5, beta2=0.999, epsilon=1e-7):
        self.state = AdamaxState(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self, params, grads, lr=None):
        new_params, self.state = adamax_step(params, grads, self.state, lr=lr)
        return new_params
