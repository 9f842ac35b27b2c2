from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from rgtom.errors import ConfigError
from rgtom.nnkit.tensor import Tensor


class ParamStore:
    """Named trainable tensors with gradients of identical shape."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._params.items()
        }

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        if strict and set(state) != set(self._params):
            missing = set(self._params) ^ set(state)
            raise ConfigError(f"parameter names differ: {sorted(missing)}")
        for k, v in state.items():
            if k not in self._params:
                continue
            t = self._params[k]
            if tuple(np.shape(v)) != t.data.shape:
                raise ConfigError(f"shape mismatch for {k}: {np.shape(v)} vs {t.data.shape}")
            t.data = np.array(v, dtype=self.dtype)

    def copy_from(self, other: "ParamStore") -> None:
        self.load_state(other.state())

    def clone(self, dtype=None) -> "ParamStore":
        out = ParamStore(dtype or self.dtype)
        for k, t in self._params.items():
            out.add(k, t.data)
        return out

    def fingerprint(self) -> bytes:
        return b"".join(t.data.tobytes() for t in self._params.values())


def uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)
