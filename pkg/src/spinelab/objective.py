"""Clipped token-level surrogate, fork-masked KL anchor, and the full loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .band import band_regularizer
from .policy import score_responses

NORMALIZATIONS = ("mask", "token")


def ppo_ratio(logprob_new, logprob_old):
    """exp(new - old); tensors in give a tensor out."""
    if isinstance(logprob_new, T.Tensor):
        return T.exp(T.sub(logprob_new, logprob_old))
    return float(np.exp(float(logprob_new) - float(logprob_old)))


def clipped_term(ratio, advantage, clip_eps=0.2):
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    if isinstance(ratio, T.Tensor):
        return T.minimum(T.mul(ratio, advantage),
                         T.mul(T.clip(ratio, 1 - clip_eps, 1 + clip_eps), advantage))
    r, a = float(ratio), float(advantage)
    return min(r * a, min(max(r, 1 - clip_eps), 1 + clip_eps) * a)


def token_kl(logp, ref_logp):
    """Exact categorical KL(p || ref) per position from log-probabilities."""
    if isinstance(logp, T.Tensor):
        return T.sum(T.mul(T.exp(logp), T.sub(logp, ref_logp)), axis=-1)
    logp = np.asarray(logp, dtype=np.float64)
    return (np.exp(logp) * (logp - np.asarray(ref_logp))).sum(axis=-1)


def masked_kl(logp, ref_logp, mask, eps=1e-6):
    """Sum of per-token KL over masked positions divided by (mask count + eps).

    ``logp``/``ref_logp`` are (..., V) log-probabilities; ``mask`` has the
    leading shape.
    """
    m = np.asarray(mask, dtype=np.float64)
    kl = token_kl(logp, ref_logp)
    if isinstance(kl, T.Tensor):
        return T.div(T.masked_sum(kl, m), m.sum() + eps)
    return float((kl * m).sum() / (m.sum() + eps))


@dataclass
class LossBreakdown:
    total: T.Tensor
    ppo_term: float
    kl_term: float
    band_term: float
    mask_count: int
    ratio_mean: float
    ratio_min: float
    ratio_max: float
    clip_fraction: float
    band_violation_rate: float = 0.0

    def as_dict(self):
        return {"loss_total": float(self.total.item()), "ppo_term": self.ppo_term,
                "kl_term": self.kl_term, "band_term": self.band_term,
                "mask_count": self.mask_count, "ratio_mean": self.ratio_mean,
                "ratio_min": self.ratio_min, "ratio_max": self.ratio_max,
                "clip_fraction": self.clip_fraction}


def _pad_rows(rows, width, dtype):
    out = np.zeros((len(rows), width), dtype=dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def _checked(name, t):
    if not np.all(np.isfinite(t.data)):
        raise T.NumericError(name, "non-finite loss term")
    return t


def assemble_loss(policy, rollouts, advantages, fork_masks, bands, *, clip_eps=0.2,
                  lambda_kl=0.0, ref_logp=None, kl_masked=True, beta_low=0.0,
                  beta_high=0.0, eps=1e-6, normalization="mask"):
    """Differentiable loss  -E[m * clipped surrogate] + lambda * KL_fork + R_band.

    ``advantages`` holds one value per rollout, or a (B, Tmax) per-token
    array. ``rollouts`` carry ``logprobs_old``; ``fork_masks`` are per-rollout boolean
    arrays (all-ones for the uniform baseline); ``bands`` are per-rollout
    :class:`BandThresholds` or ``None`` when the band is off. ``ref_logp`` is
    the (B, Tmax, V) reference log-prob array, needed when ``lambda_kl > 0``.
    With ``normalization="mask"`` surrogate and band are averaged over
    masked tokens; ``"token"`` averages over every response token instead.
    """
    if not rollouts:
        raise ValueError("assemble_loss: empty batch")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    stats = score_responses(policy, [r.prompt_tokens for r in rollouts],
                            [r.response_tokens for r in rollouts])
    valid = stats["valid"]
    width = valid.shape[1]
    m = _pad_rows([np.asarray(fm, dtype=bool) for fm in fork_masks], width, bool) & valid
    n_masked = int(m.sum())
    n_valid = int(valid.sum())
    denom = (n_masked if normalization == "mask" else n_valid) + eps
    old = _pad_rows([r.logprobs_old for r in rollouts], width, np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if adv.ndim == 1:
        adv = np.broadcast_to(adv.reshape(-1, 1), valid.shape)
    elif adv.shape != valid.shape:
        raise T.ShapeError("assemble_loss advantages", adv.shape, valid.shape)

    # padded slots: logp_new is a real (if meaningless) value, old is 0; they
    # are masked out of every reduction below.
    ratio = T.exp(T.sub(stats["logp"], np.where(valid, old, stats["logp"].data)))
    surrogate = clipped_term(ratio, adv, clip_eps)
    ppo = _checked("ppo_term", T.div(T.masked_sum(surrogate, m), denom))
    total = T.neg(ppo)

    kl_val = 0.0
    if lambda_kl:
        if ref_logp is None:
            raise ValueError("lambda_kl > 0 needs reference log-probabilities")
        kmask = m if kl_masked else valid
        kl = _checked("kl_term", masked_kl(stats["logp_all"], ref_logp, kmask, eps))
        kl_val = float(kl.item())
        total = T.add(total, T.mul(kl, lambda_kl))

    band_val = 0.0
    viol = 0.0
    if bands is not None and (beta_low or beta_high):
        lo = np.array([b.h_low for b in bands])
        hi = np.array([b.h_high for b in bands])
        norm = None if normalization == "mask" else n_valid + eps
        band = _checked("band_term", band_regularizer(stats["entropy"], m, lo, hi, beta_low,
                                                      beta_high, eps, norm))
        band_val = float(band.item())
        total = T.add(total, band)
        h = stats["entropy"].data
        viol = float((((h < lo[:, None]) | (h > hi[:, None])) & m).sum() / max(n_masked, 1))

    # ratio statistics cover every response token; clipping only matters where masked
    r = ratio.data[valid]
    clipped = np.abs(ratio.data[m] - 1.0) > clip_eps
    return LossBreakdown(total, float(ppo.item()), kl_val, band_val, n_masked,
                         float(r.mean()), float(r.min()), float(r.max()),
                         float(clipped.mean()) if clipped.size else 0.0, viol)
