"""Per-sample quantile entropy band and its hinge regulariser."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class BandThresholds:
    h_low: float
    h_high: float
    sample_id: object = None


def quantile_tensor(x, q):
    """Differentiable linear-interpolation quantile of a 1-D tensor."""
    x = T.tensor(x)
    k = x.shape[0]
    order = np.argsort(x.data, kind="stable")
    pos = q * (k - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, k - 1)
    frac = pos - lo
    col = T.reshape(x, (k, 1))
    below = T.reshape(T.embedding(col, [order[lo]]), ())
    above = T.reshape(T.embedding(col, [order[hi]]), ())
    return T.add(T.mul(below, 1.0 - frac), T.mul(above, frac))


def band_thresholds(fork_entropies, q_low=0.10, q_high=0.50, sample_id=None):
    """Quantile pair over a sample's forking-token entropies.

    The result is a pair of plain floats, i.e. constants to any later
    differentiation. Tensor inputs go through :func:`stop_gradient` first.
    """
    if not 0 <= q_low <= q_high <= 1:
        raise ValueError("need 0 <= q_low <= q_high <= 1")
    if isinstance(fork_entropies, T.Tensor):
        fork_entropies = T.stop_gradient(fork_entropies).data
    h = np.asarray(fork_entropies, dtype=np.float64).reshape(-1)
    if h.size < 1:
        raise ValueError("need at least one forking-token entropy")
    lo, hi = np.quantile(h, [q_low, q_high], method="linear")
    return BandThresholds(float(lo), float(hi), sample_id)


def hinge_penalties(h_t, band):
    """(deficit below h_low, excess above h_high); floats in, floats out."""
    if isinstance(h_t, T.Tensor):
        return T.relu(T.sub(band.h_low, h_t)), T.relu(T.sub(h_t, band.h_high))
    h_t = float(h_t)
    return max(0.0, band.h_low - h_t), max(0.0, h_t - band.h_high)


def band_regularizer(entropies, masks, h_low, h_high, beta_low, beta_high,
                     eps=1e-6, normalizer=None):
    """Masked hinge penalty, averaged over masked tokens.

    ``entropies`` is a live (B, T) tensor; ``masks`` (B, T) and the per-row
    thresholds ``h_low``/``h_high`` (B,) are constants. ``normalizer``
    overrides the default ``mask.sum() + eps`` denominator.
    """
    m = np.asarray(masks, dtype=np.float64)
    lo = np.asarray(h_low, dtype=np.float64).reshape(-1, 1)
    hi = np.asarray(h_high, dtype=np.float64).reshape(-1, 1)
    if beta_low == 0 and beta_high == 0:
        return T.Tensor(0.0)
    pen = T.add(T.mul(T.relu(T.sub(lo, entropies)), beta_low),
                T.mul(T.relu(T.sub(entropies, hi)), beta_high))
    denom = m.sum() + eps if normalizer is None else normalizer
    return T.div(T.masked_sum(pen, m), denom)


def violation_rate(entropies, masks, h_low, h_high):
    """Share of masked tokens whose entropy falls outside its band."""
    h = np.asarray(entropies, dtype=np.float64)
    m = np.asarray(masks, dtype=bool)
    lo = np.asarray(h_low).reshape(-1, 1)
    hi = np.asarray(h_high).reshape(-1, 1)
    out = ((h < lo) | (h > hi)) & m
    return float(out.sum() / max(m.sum(), 1))
