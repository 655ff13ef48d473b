"""Synthetic modular-arithmetic chains with a reasoning trace.

A prompt of difficulty ``d`` encodes ``d`` left-to-right operations, each
operand introduced by a tag token::

    <bos> C 0 4 D + 0 7 E * 0 2 F + 0 5 % 1 1 ?

The full rendered response restates the first operand, then walks the
chain one step per segment (tag, operator, operand, running value) and
states the answer after the marker::

    C 0 4 ; D + 0 7 0 0 ; E * 0 2 0 0 ; F + 0 5 0 5 ; => 0 5 <stop>

Restating the operator and operand keeps each step local, so a model
trained on short chains has a chance to carry the procedure to longer ones.

Numbers are written as fixed-width two-digit strings. Gold answers never
leave :class:`TaskInstance`; the adaptation path only ever sees
:class:`Prompt` objects.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .oracles import oracle_chain_value

DIGITS = [str(i) for i in range(10)]
OPS = ["+", "-", "*"]
TAGS = list("ABCDEFGH")
SPECIALS = ["%", "?", "=>", ";", "<bos>", "<stop>", "<pad>"]
SYMBOLS = DIGITS + OPS + SPECIALS + TAGS
VOCAB_SIZE = 32  # room for the symbols above plus unused ids

TOKEN_ID = {s: i for i, s in enumerate(SYMBOLS)}
MARKER = TOKEN_ID["=>"]
STOP = TOKEN_ID["<stop>"]
PAD = TOKEN_ID["<pad>"]
BOS = TOKEN_ID["<bos>"]
SEP = TOKEN_ID[";"]
DIGIT_IDS = frozenset(range(10))
TAG_IDS = [TOKEN_ID[t] for t in TAGS]

TASK_KINDS = ("modchain",)
SPLITS = ("pretrain", "adapt", "eval")
DUMP_VERSION = 1
WIDTH = 2


def encode(symbols):
    return [TOKEN_ID[s] for s in symbols]


def decode(tokens):
    return [SYMBOLS[t] if 0 <= t < len(SYMBOLS) else f"<unk{t}>" for t in tokens]


def _num(x):
    return list(f"{x:0{WIDTH}d}")


@dataclass(frozen=True)
class Prompt:
    """An unlabeled test input; the only thing the adaptation path receives."""
    id: str
    prompt_tokens: tuple


@dataclass(frozen=True)
class TaskInstance:
    id: str
    split: str
    difficulty: int
    prompt_tokens: tuple
    gold_answer: str
    modulus: int
    operands: tuple
    ops: tuple
    first_tag: int

    def unlabeled(self):
        return Prompt(self.id, self.prompt_tokens)

    def partials(self):
        v = self.operands[0]
        out = []
        for op, x in zip(self.ops, self.operands[1:]):
            v = _apply(op, v, x) % self.modulus
            out.append(v)
        return out

    def to_record(self):
        return {"v": DUMP_VERSION, "id": self.id, "split": self.split,
                "difficulty": self.difficulty, "prompt": list(self.prompt_tokens),
                "gold": self.gold_answer}


@dataclass(frozen=True)
class AnswerExtraction:
    raw_span: tuple
    canonical: str | None
    valid: bool


def _apply(op, a, b):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    return a * b


def canonicalize(digits):
    """Digit string to canonical form: leading zeros dropped, ``""`` -> None."""
    if not digits or not all(c.isdigit() for c in digits):
        return None
    return digits.lstrip("0") or "0"


def _render_prompt(operands, ops, modulus, first_tag):
    syms = ["<bos>", TAGS[first_tag]] + _num(operands[0])
    for k, (op, x) in enumerate(zip(ops, operands[1:]), start=1):
        syms += [TAGS[first_tag + k], op] + _num(x)
    syms += ["%"] + _num(modulus) + ["?"]
    return tuple(encode(syms))


def generate_instances(task_kind, difficulty_range, count, seed, split="pretrain",
                       modulus=11, id_prefix=None, exclude=()):
    """Draw ``count`` chain instances with difficulty in the inclusive range.

    Deterministic under ``seed``. Prompts listed in ``exclude`` (token tuples)
    are skipped, which is how disjoint splits are built.
    """
    if task_kind not in TASK_KINDS:
        raise ValueError(f"unknown task_kind {task_kind!r}; expected one of {TASK_KINDS}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    lo, hi = difficulty_range
    if not 1 <= lo <= hi <= len(TAGS) - 1:
        raise ValueError(f"difficulty range must lie in [1, {len(TAGS) - 1}]")
    if not 2 <= modulus <= 10 ** WIDTH:
        raise ValueError("modulus out of range")
    rng = np.random.default_rng(seed)
    seen = set(exclude)
    prefix = id_prefix or split
    out = []
    attempts = 0
    while len(out) < count:
        attempts += 1
        if attempts > 100 * count + 1000:
            raise ValueError("could not draw enough distinct instances")
        d = int(rng.integers(lo, hi + 1))
        operands = tuple(int(x) for x in rng.integers(0, modulus, size=d + 1))
        ops = tuple(OPS[i] for i in rng.integers(0, len(OPS), size=d))
        first_tag = int(rng.integers(0, len(TAGS) - d))
        prompt = _render_prompt(operands, ops, modulus, first_tag)
        if prompt in seen:
            continue
        seen.add(prompt)
        v = operands[0]
        for op, x in zip(ops, operands[1:]):
            v = _apply(op, v, x) % modulus
        gold = str(v)
        if oracle_chain_value(decode(prompt)) != v:
            raise AssertionError(f"gold mismatch for {decode(prompt)}")
        out.append(TaskInstance(f"{prefix}-{len(out):05d}", split, d, prompt, gold,
                                modulus, operands, ops, first_tag))
    return out


def make_splits(seed, n_pretrain=4000, n_adapt=64, n_eval=200,
                pretrain_range=(1, 3), shifted_range=(4, 6), modulus=11):
    """Pretrain / adapt / eval splits; adapt and eval share no prompt."""
    pre = generate_instances("modchain", pretrain_range, n_pretrain, seed, "pretrain",
                             modulus)
    adapt = generate_instances("modchain", shifted_range, n_adapt, seed + 1, "adapt",
                               modulus)
    ev = generate_instances("modchain", shifted_range, n_eval, seed + 2, "eval", modulus,
                            exclude={a.prompt_tokens for a in adapt})
    return pre, adapt, ev


def render_response(inst, direct=False):
    """Target response tokens for supervised pretraining.

    ``direct=True`` renders the answer without the reasoning trace.
    """
    syms = []
    if not direct:
        syms += [TAGS[inst.first_tag]] + _num(inst.operands[0]) + [";"]
        steps = zip(inst.ops, inst.operands[1:], inst.partials())
        for k, (op, x, v) in enumerate(steps, start=1):
            syms += [TAGS[inst.first_tag + k], op] + _num(x) + _num(v) + [";"]
    syms += ["=>"] + _num(int(inst.gold_answer)) + ["<stop>"]
    return tuple(encode(syms))


def extract_answer_tokens(tokens, terminated=True):
    tokens = list(tokens)
    if not terminated or MARKER not in tokens:
        return AnswerExtraction((), None, False)
    i = tokens.index(MARKER) + 1
    span = []
    while i < len(tokens) and tokens[i] in DIGIT_IDS:
        span.append(tokens[i])
        i += 1
    canon = canonicalize("".join(SYMBOLS[t] for t in span))
    return AnswerExtraction(tuple(span), canon, canon is not None)


def extract_answer(rollout):
    """Answer after the first marker; truncated or markerless responses are invalid."""
    return extract_answer_tokens(rollout.response_tokens, rollout.terminated)


def grade(answer, gold):
    """1 on exact canonical match, else 0. ``answer`` may be an extraction or string."""
    if isinstance(answer, AnswerExtraction):
        if not answer.valid:
            return 0
        answer = answer.canonical
    if answer is None:
        return 0
    a, g = canonicalize(str(answer)), canonicalize(str(gold))
    return int(a is not None and a == g)


def dump_instances(instances, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_record(), sort_keys=True) + "\n")


def load_instance_records(path):
    """Read a dump back as plain dicts (the dump omits generation internals)."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if rec.get("v") != DUMP_VERSION:
                    raise ValueError(f"unsupported instance dump version {rec.get('v')}")
                records.append(rec)
    return records
