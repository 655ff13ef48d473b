"""Supervised next-token pretraining of the toy policy on the pretrain split."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .evaluation import evaluate_pass1
from .optim import Adam
from .policy import PolicyConfig, TransformerPolicy, score_responses
from .tasks import render_response

log = logging.getLogger(__name__)


class PretrainError(RuntimeError):
    def __init__(self, accuracy, floor):
        self.accuracy = accuracy
        super().__init__(f"pretraining ended at in-distribution Pass@1 {accuracy:.3f} "
                         f"< floor {floor:.3f}")


@dataclass
class PretrainConfig:
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 30
    pass_floor: float = 0.6
    target: float | None = None
    direct_answer_rate: float = 0.0
    max_pos_offset: int = 32
    seed: int = 0
    eval_every: int = 1


def pretrain(instances, cfg=None, eval_instances=None, policy=None):
    """Cross-entropy training on rendered (prompt, trace, marker, answer) sequences.

    Returns ``(policy, history)``. Raises :class:`PretrainError` if the final
    in-distribution Pass@1 stays below ``cfg.pass_floor``.
    """
    cfg = cfg or PretrainConfig()
    rng = np.random.default_rng(cfg.seed)
    policy = policy or TransformerPolicy(cfg.policy, seed=cfg.seed)
    opt = Adam(policy.parameters(), lr=cfg.lr)
    history = []
    acc = None
    n = len(instances)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            batch = [instances[i] for i in order[s:s + cfg.batch_size]]
            direct = rng.random(len(batch)) < cfg.direct_answer_rate
            responses = [render_response(x, bool(d)) for x, d in zip(batch, direct)]
            prompts = [x.prompt_tokens for x in batch]
            longest = max(len(p) + len(r) for p, r in zip(prompts, responses))
            room = max(0, min(cfg.max_pos_offset, cfg.policy.context_len - longest))
            offsets = rng.integers(0, room + 1, size=len(batch))
            with T.fresh_tape():
                stats = score_responses(policy, prompts, responses, pos_offset=offsets)
                valid = stats["valid"]
                loss = T.div(T.masked_sum(stats["logp"], valid), -float(valid.sum()))
                opt.zero_grad()
                T.backward(loss)
            opt.step()
            losses.append(float(loss.item()))
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if eval_instances is not None and ((epoch + 1) % cfg.eval_every == 0
                                           or epoch == cfg.epochs - 1):
            acc = evaluate_pass1(policy, eval_instances)
            rec["pass_at_1"] = acc
        history.append(rec)
        log.info("pretrain epoch %d loss %.4f pass@1 %s", epoch, rec["loss"], rec.get("pass_at_1"))
        if cfg.target is not None and acc is not None and acc >= cfg.target:
            break
    if eval_instances is not None:
        if acc is None:
            acc = evaluate_pass1(policy, eval_instances)
        if acc < cfg.pass_floor:
            raise PretrainError(acc, cfg.pass_floor)
    return policy, history
