"""Forking-token selection: the highest-entropy positions of each response."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ForkMask:
    mask: np.ndarray
    k_selected: int
    ratio: float


def fork_count(n_tokens, ratio):
    """max(1, ceil(ratio * n)); products within 1e-9 of an integer are snapped."""
    x = ratio * n_tokens
    r = round(x)
    k = r if abs(x - r) < 1e-9 else math.ceil(x)
    return max(1, int(k))


def select_forking(entropies, ratio=0.2):
    """Mark the ``fork_count(T, ratio)`` highest-entropy positions.

    Equal entropies at the cut are resolved in favour of the earlier position.
    """
    h = np.asarray(entropies, dtype=np.float64)
    if h.ndim != 1 or h.size < 1:
        raise ValueError("entropies must be a non-empty 1-D sequence")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must lie in (0, 1]")
    k = fork_count(h.size, ratio)
    order = np.lexsort((np.arange(h.size), -h))
    mask = np.zeros(h.size, dtype=bool)
    mask[order[:k]] = True
    return ForkMask(mask, k, float(ratio))
