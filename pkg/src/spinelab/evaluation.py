"""Greedy Pass@1 evaluation."""
from __future__ import annotations

import numpy as np

from .policy import DecodeConfig, generate
from .tasks import extract_answer, grade


def greedy_outputs(policy, instances, max_new_tokens=64, batch_size=256):
    cfg = DecodeConfig(temperature=0.0, top_p=1.0, max_new_tokens=max_new_tokens)
    out = []
    for i in range(0, len(instances), batch_size):
        chunk = instances[i:i + batch_size]
        out.extend(generate(policy, [x.prompt_tokens for x in chunk], cfg))
    return out


def evaluate_pass1(policy, instances, max_new_tokens=64, return_outputs=False):
    """Share of instances whose single greedy answer matches the gold answer."""
    if not instances:
        raise ValueError("no evaluation instances")
    outs = greedy_outputs(policy, instances, max_new_tokens)
    scores = np.array([grade(extract_answer(r), x.gold_answer) for r, x in zip(outs, instances)])
    acc = float(scores.mean())
    return (acc, outs) if return_outputs else acc
