"""Finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from rgtom.nnkit.params import ParamStore
from rgtom.nnkit.tensor import Tensor, backward

MAX_VALUES = 10_000


@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float
    flagged: list[str] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def ok(self) -> bool:
        return not self.flagged


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)`` over one parameter tensor."""
    diff = np.linalg.norm((analytic - numeric).ravel())
    scale = max(np.linalg.norm(analytic.ravel()), np.linalg.norm(numeric.ravel()), floor)
    return float(diff / scale)


def numeric_grads(params: ParamStore, loss_fn: Callable[[ParamStore], Tensor], step: float) -> dict[str, np.ndarray]:
    out = {}
    for name, t in params.items():
        g = np.zeros(t.data.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn(params).data)
            flat[i] = orig - step
            down = float(loss_fn(params).data)
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def grad_check(
    model_builder: Callable[[], tuple[ParamStore, Callable[[ParamStore], Tensor]]],
    tolerance: float = 1e-3,
    step: float = 1e-4,
) -> GradReport:
    """Compare backprop gradients against central differences.

    ``model_builder`` returns ``(params, loss_fn)``; ``loss_fn(params)``
    must rebuild the forward pass and return a scalar tensor. Use a
    float64 store: float32 round-off swamps a 1e-4 step.
    """
    params, loss_fn = model_builder()
    if params.n_values() > MAX_VALUES:
        raise ValueError(f"model has {params.n_values()} values; finite differences capped at {MAX_VALUES}")
    params.zero_grad()
    loss = loss_fn(params)
    backward(loss, params.tensors())
    analytic = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.grads.items()}
    params.zero_grad()
    numeric = numeric_grads(params, loss_fn, step)
    errors = {k: relative_error(analytic[k], numeric[k]) for k in analytic}
    flagged = [k for k, e in errors.items() if e > tolerance]
    return GradReport(errors=errors, tolerance=tolerance, flagged=flagged)
