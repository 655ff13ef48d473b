"""Brute-force reference computations used to cross-check the engine.

Nothing here imports from the rest of the package: each oracle is a direct,
loop-level transcription of its definition so that a shared bug cannot hide
in both routes.
"""
from __future__ import annotations

import ast
import hashlib
import math
import operator
from dataclasses import dataclass

import numpy as np


@dataclass
class OracleReport:
    check_name: str
    inputs_digest: str
    oracle_value: float
    system_value: float
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return (f"[{tag}] {self.check_name}: oracle={self.oracle_value:.12g} "
                f"system={self.system_value:.12g} abs={self.abs_error:.3g} "
                f"rel={self.rel_error:.3g} tol={self.tolerance:g}")


def digest(*arrays):
    h = hashlib.sha1()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())
    return h.hexdigest()[:12]


def report(name, oracle, system, tol, inputs=(), relative=False):
    o = np.asarray(oracle, dtype=np.float64)
    s = np.asarray(system, dtype=np.float64)
    abs_err = float(np.max(np.abs(o - s))) if o.size else 0.0
    scale = float(np.max(np.abs(o))) if o.size else 0.0
    rel_err = abs_err / scale if scale > 0 else abs_err
    err = rel_err if relative else abs_err
    return OracleReport(name, digest(*inputs), float(o.reshape(-1)[0]) if o.size else 0.0,
                        float(s.reshape(-1)[0]) if s.size else 0.0,
                        abs_err, rel_err, tol, bool(err <= tol))


def _probs(logits):
    m = max(logits)
    w = [math.exp(z - m) for z in logits]
    tot = 0.0
    for x in w:
        tot += x
    return [x / tot for x in w]


def oracle_entropy(logits):
    """-sum p log p over a single logit vector, skipping p == 0 terms."""
    h = 0.0
    for p in _probs(list(map(float, logits))):
        if p > 0.0:
            h -= p * math.log(p)
    return h


def oracle_kl(logits_p, logits_q):
    """KL(p || q) for two logit vectors, by direct summation."""
    p = _probs(list(map(float, logits_p)))
    q = _probs(list(map(float, logits_q)))
    kl = 0.0
    for pi, qi in zip(p, q):
        if pi > 0.0:
            kl += pi * (math.log(pi) - math.log(qi))
    return kl


def oracle_quantile(values, q):
    """Linear-interpolation quantile at rank q*(k-1) of the sorted values."""
    xs = sorted(float(v) for v in values)
    if len(xs) == 1:
        return xs[0]
    pos = q * (len(xs) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(xs) - 1)
    frac = pos - lo
    return xs[lo] + (xs[hi] - xs[lo]) * frac


def oracle_advantages(rewards, eps=1e-6):
    n = len(rewards)
    mu = 0.0
    for r in rewards:
        mu += r
    mu /= n
    var = 0.0
    for r in rewards:
        var += (r - mu) ** 2
    sd = math.sqrt(var / n)
    return [(r - mu) / (sd + eps) for r in rewards]


def oracle_hinges(h, h_low, h_high):
    """(low deficit, high excess) hinge pair for one token entropy."""
    low = h_low - h if h < h_low else 0.0
    high = h - h_high if h > h_high else 0.0
    return low, high


def oracle_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x0=0.0):
    """Scalar Adam trace, one step per entry of ``grads``; returns all iterates."""
    x, m, v, out = x0, 0.0, 0.0, []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        out.append(x)
    return out


def finite_difference_gradient(loss_fn, params, h=1e-5):
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``params``.

    ``params`` is a list of float64 numpy arrays that ``loss_fn`` reads; they
    are perturbed in place and restored.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn())
            flat[i] = orig - h
            down = float(loss_fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all coordinates."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a).reshape(-1)
        n = np.asarray(n).reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul}


def _eval_node(node):
    if isinstance(node, ast.Expression):
        return _eval_node(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, int):
        return node.value
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_eval_node(node.left), _eval_node(node.right))
    raise ValueError(f"unsupported expression node {ast.dump(node)}")


def oracle_chain_value(symbols):
    """Evaluate a rendered chain prompt given as a list of symbol strings.

    Operands are the digit runs; operators are ``+ - *``; ``%`` introduces the
    modulus. The chain is fully parenthesised left-to-right, evaluated with
    unbounded integers, and reduced once at the end.
    """
    numbers, ops, digits, modulus = [], [], "", None
    mode = "body"
    for s in symbols:
        if s.isdigit():
            digits += s
            continue
        if digits:
            if mode == "mod":
                modulus = int(digits)
            else:
                numbers.append(int(digits))
            digits = ""
        if s in ("+", "-", "*"):
            ops.append(s)
        elif s == "%":
            mode = "mod"
    if digits:
        if mode == "mod":
            modulus = int(digits)
        else:
            numbers.append(int(digits))
    if modulus is None or len(numbers) != len(ops) + 1:
        raise ValueError("malformed chain")
    expr = str(numbers[0])
    for op, x in zip(ops, numbers[1:]):
        expr = f"({expr}{op}{x})"
    return _eval_node(ast.parse(expr, mode="eval")) % modulus
