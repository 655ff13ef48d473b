"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every forward op that touches a tensor with ``requires_grad`` appends a node
to the active :class:`Tape`. :func:`backward` walks the tape in reverse,
so recording order doubles as topological order.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

__all__ = [
    "Tensor", "Tape", "TensorError", "ShapeError", "NumericError",
    "tensor", "backward", "no_grad", "grad_enabled", "stop_gradient",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "exp", "log",
    "relu", "maximum", "minimum", "clip", "sum", "mean", "reshape",
    "transpose", "softmax", "log_softmax", "embedding", "take_last",
    "layer_norm", "masked_sum", "entropy_from_logits",
]


class TensorError(ValueError):
    """Base class for tensor-engine errors."""


class ShapeError(TensorError):
    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shp = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shp}")


class NumericError(TensorError):
    def __init__(self, op, detail="non-finite value in output"):
        self.op = op
        super().__init__(f"{op}: {detail}")


class Tensor:
    """Row-major float64 array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False):
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


class Tape:
    """Ordered record of executed ops.

    Each node is ``(output, inputs, vjp)`` where ``vjp`` maps the output
    cotangent to a tuple of input cotangents (``None`` for inputs that do not
    need one).
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, vjp):
        self.nodes.append((out, inputs, vjp))

    def reset(self):
        self.nodes = []

    def backward(self, loss):
        if not isinstance(loss, Tensor):
            raise TensorError("backward: loss must be a Tensor")
        if loss.size != 1:
            raise ShapeError("backward (loss must be scalar)", loss.shape)
        if not self.nodes:
            raise TensorError("backward: empty tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for out, inputs, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        self.reset()


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _State()


def active_tape():
    return _state.tape


def grad_enabled():
    return _state.enabled


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run a block on its own tape; restores the previous tape afterwards."""
    prev = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = prev


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    _state.tape.backward(loss)


def _make(op, value, inputs, vjp):
    if not np.all(np.isfinite(value)):
        raise NumericError(op)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out._leaf = False
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        _state.tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def stop_gradient(x):
    """Identity on values; no gradient flows back through the result."""
    x = tensor(x)
    return Tensor(x.data, requires_grad=False)


def add(a, b):
    a, b = tensor(a), tensor(b)
    _bshape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = tensor(a), tensor(b)
    _bshape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = tensor(a), tensor(b)
    _bshape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b):
    a, b = tensor(a), tensor(b)
    _bshape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                            _unbroadcast(-g * a.data / b.data ** 2, b.shape) if b.requires_grad else None))


def neg(a):
    a = tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p):
    a = tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data ** p
    return _make("power", out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def matmul(a, b):
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), vjp)


def exp(a):
    a = tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def maximum(a, c):
    """Elementwise ``max(a, c)`` against a constant ``c``; slope 0 at the kink."""
    a = tensor(a)
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    out = np.maximum(a.data, c)
    return _make("maximum", out, (a,), lambda g: (_unbroadcast(g * (a.data > c), a.shape),))


def relu(a):
    return maximum(a, 0.0)


def minimum(a, b):
    """Elementwise min; on ties the gradient goes to ``a``."""
    a, b = tensor(a), tensor(b)
    _bshape("minimum", a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _make("minimum", out, (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                            _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None))


def clip(a, lo, hi):
    a = tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", out, (a,), lambda g: (g * inside,))


def sum(a, axis=None, keepdims=False):
    a = tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out, dtype=np.float64), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = tensor(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def masked_sum(a, mask):
    """Sum of ``a * mask`` over all entries; ``mask`` is a constant array."""
    a = tensor(a)
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError("masked_sum", a.shape, m.shape)
    out = np.asarray(np.sum(a.data * m))
    return _make("masked_sum", out, (a,), lambda g: (g * m,))


def reshape(a, shape):
    a = tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def log_softmax(a, axis=-1):
    a = tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (a,), vjp)


def softmax(a, axis=-1):
    a = tensor(a)
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), vjp)


def embedding(weight, ids):
    """Row gather ``weight[ids]``; gradients scatter-add back into rows."""
    weight = tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding (index out of range)", weight.shape, ids.shape)
    out = weight.data[ids]

    def vjp(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return _make("embedding", out, (weight,), vjp)


def take_last(a, ids):
    """Pick ``a[..., ids[...]]`` along the last axis."""
    a = tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise ShapeError("take_last", a.shape, ids.shape)
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ids[..., None], g[..., None], axis=-1)
        return (ga,)

    return _make("take_last", out, (a,), vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make("layer_norm", out, (x, gamma, beta), vjp)


def entropy_from_logits(logits, axis=-1):
    """Categorical entropy in nats, ``-sum p log p`` with ``0 log 0 = 0``."""
    logp = log_softmax(logits, axis=axis)
    return neg(sum(mul(exp(logp), logp), axis=axis))
