"""Majority-vote pseudo-labels, agreement rewards and group-standardised advantages."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .tasks import AnswerExtraction


def _key(answer):
    if isinstance(answer, AnswerExtraction):
        return answer.canonical if answer.valid else None
    return answer


def majority_vote(answers):
    """Most frequent valid answer; ties go to the one seen first. ``None`` if none valid."""
    keys = [_key(a) for a in answers]
    counts = Counter(k for k in keys if k is not None)
    if not counts:
        return None
    best = max(counts.values())
    for k in keys:
        if k is not None and counts[k] == best:
            return k


def leave_one_out_vote(answers, i):
    """Consensus of every answer except the ``i``-th."""
    return majority_vote([a for j, a in enumerate(answers) if j != i])


def reward(answer, consensus):
    """1.0 on exact agreement with the consensus, else 0.0."""
    key = _key(answer)
    return float(consensus is not None and key is not None and key == consensus)


def grouped_advantages(rewards, eps=1e-6):
    """(r - mean) / (population std + eps); all-equal rewards give exact zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if eps <= 0:
        raise ValueError("eps must be positive")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + eps)


@dataclass
class Group:
    prompt_id: str
    rollouts: list
    answers: list
    consensus: str | None
    rewards: np.ndarray
    advantages: np.ndarray
    loo_consensus: list = field(default_factory=list)

    @property
    def n(self):
        return len(self.rollouts)


def build_group(prompt_id, rollouts, answers, leave_one_out=False, eps=1e-6):
    if len(rollouts) < 2:
        raise ValueError("a group needs N >= 2 rollouts")
    if leave_one_out and len(rollouts) < 3:
        raise ValueError("leave-one-out voting needs N >= 3")
    consensus = majority_vote(answers)
    if leave_one_out:
        loo = [leave_one_out_vote(answers, i) for i in range(len(answers))]
        rewards = np.array([reward(a, c) for a, c in zip(answers, loo)])
    else:
        loo = []
        rewards = np.array([reward(a, consensus) for a in answers])
    return Group(prompt_id, list(rollouts), list(answers), consensus, rewards,
                 grouped_advantages(rewards, eps), loo)
