"""Layer helpers: parameters live in a :class:`ParamStore` under a name prefix.

Gated recurrent cell used throughout (``h`` previous state, ``x`` input)::

    z  = sigmoid(x W_z + h U_z + b_z)          update gate
    r  = sigmoid(x W_r + h U_r + b_r)          reset gate
    n  = tanh(x W_n + (r * h) U_n + b_n)       candidate state
    h' = (1 - z) * n + z * h

Inputs and states are row vectors (or batches of rows), so weight matrices
are stored ``in_dim x out_dim``.
"""

from __future__ import annotations

import numpy as np

from rgtom.errors import ConfigError
from rgtom.nnkit import tensor as T
from rgtom.nnkit.params import ParamStore, uniform_init
from rgtom.nnkit.tensor import Tensor


def init_dense(store: ParamStore, prefix: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    store.add(f"{prefix}.W", uniform_init(rng, (d_in, d_out), d_in))
    store.add(f"{prefix}.b", uniform_init(rng, (d_out,), d_in))


def dense(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    W = store[f"{prefix}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ConfigError(f"{prefix}: input dim {x.shape[-1]} != {W.shape[0]}")
    return T.matmul(x, W) + store[f"{prefix}.b"]


def init_embedding(store: ParamStore, prefix: str, n: int, dim: int, rng: np.random.Generator) -> None:
    # fan_in of a one-hot lookup is 1; scale by dim instead to keep inputs O(1/sqrt(dim))
    store.add(f"{prefix}.E", uniform_init(rng, (n, dim), dim))


def embedding(store: ParamStore, prefix: str, ids) -> Tensor:
    table = store[f"{prefix}.E"]
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ConfigError(f"{prefix}: token id out of range")
    return T.take_rows(table, ids)


def init_gru(store: ParamStore, prefix: str, d_in: int, d_hidden: int, rng: np.random.Generator) -> None:
    for gate in ("z", "r", "n"):
        store.add(f"{prefix}.W_{gate}", uniform_init(rng, (d_in, d_hidden), d_in))
        store.add(f"{prefix}.U_{gate}", uniform_init(rng, (d_hidden, d_hidden), d_hidden))
        store.add(f"{prefix}.b_{gate}", uniform_init(rng, (d_hidden,), d_hidden))


def gru_step(store: ParamStore, h: Tensor, x: Tensor, prefix: str = "cell") -> Tensor:
    """One recurrent update; pure function of ``(h, x, params)``."""
    W_z = store[f"{prefix}.W_z"]
    d_in, d_h = W_z.shape
    if x.shape[-1] != d_in or h.shape[-1] != d_h:
        raise ConfigError(
            f"{prefix}: expected input dim {d_in} and state dim {d_h}, "
            f"got {x.shape[-1]} and {h.shape[-1]}"
        )
    p = lambda name: store[f"{prefix}.{name}"]  # noqa: E731
    z = T.sigmoid(x @ p("W_z") + h @ p("U_z") + p("b_z"))
    r = T.sigmoid(x @ p("W_r") + h @ p("U_r") + p("b_r"))
    n = T.tanh(x @ p("W_n") + (r * h) @ p("U_n") + p("b_n"))
    return (1.0 - z) * n + z * h


def recurrent_step(state, inp, params: ParamStore, prefix: str = "cell") -> np.ndarray:
    """Array-in, array-out convenience wrapper around :func:`gru_step`."""
    h = T.as_tensor(np.asarray(state, dtype=params.dtype))
    x = T.as_tensor(np.asarray(inp, dtype=params.dtype))
    return gru_step(params, h, x, prefix).data
