"""Small numerical helpers used across the loss and selection code."""

import numpy as np


def logsumexp(logits: np.ndarray) -> float:
    """log(sum(exp(logits))) with max subtraction; logits is 1-D."""
    m = np.max(logits)
    return float(m + np.log(np.sum(np.exp(logits - m))))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-stable softmax."""
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def unit_rows(x: np.ndarray) -> np.ndarray:
    """L2-normalize the rows of a 2-D array (or a single vector)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x / np.linalg.norm(x)
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def is_unit(x: np.ndarray, atol: float = 1e-6) -> bool:
    """True if every row of x has unit L2 norm within atol."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1)
    return bool(np.all(np.abs(norms - 1.0) <= atol))
