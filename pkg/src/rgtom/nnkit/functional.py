"""Plain-array probability helpers used outside the autodiff graph."""

from __future__ import annotations

import numpy as np

PROB_FLOOR = 1e-12


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("log_softmax of an empty vector")
    s = x - x.max(axis=axis, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=axis, keepdims=True))


def cross_entropy(probs, target_index: int, floor: float = PROB_FLOOR) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target_index < p.shape[-1]:
        raise ValueError(f"target index {target_index} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[target_index], floor)))


def argmax_lowest(x) -> int:
    """Argmax with ties resolved to the lowest index (numpy's behaviour, pinned)."""
    return int(np.argmax(np.asarray(x)))
