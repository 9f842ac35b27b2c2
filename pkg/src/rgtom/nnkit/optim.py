from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from rgtom.errors import ConfigError, StateError
from rgtom.nnkit.params import ParamStore


@dataclass
class OptimState:
    """Moment accumulators and step counter for one :class:`ParamStore`.

    ``rule`` is ``"adam"`` (default) or ``"sgd"``.
    """

    lr: float = 3e-4
    rule: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_grad_norm: float | None = None
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.rule not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer rule {self.rule!r}")


def optimizer_step(params: ParamStore, state: OptimState) -> ParamStore:
    """Apply one update from the populated gradients, then zero them."""
    grads = params.grads
    for name, g in grads.items():
        if g.shape != params[name].data.shape:
            raise StateError(f"gradient shape {g.shape} != parameter shape for {name}")
    scale = 1.0
    if state.max_grad_norm is not None:
        total = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if total > state.max_grad_norm:
            scale = state.max_grad_norm / (total + 1e-12)
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        g = g * scale if scale != 1.0 else g
        if state.rule == "sgd":
            p.data = (p.data - state.lr * g).astype(params.dtype)
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name] = m.astype(params.dtype)
        state.v[name] = v.astype(params.dtype)
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p.data = (p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    params.zero_grad()
    return params
