import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spinelab import tensor as T
from spinelab.oracles import finite_difference_gradient, max_relative_error, oracle_entropy

floats = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(fn, *values):
    leaves = [T.Tensor(np.array(v, dtype=np.float64), requires_grad=True) for v in values]
    with T.fresh_tape():
        loss = fn(*leaves)
        T.backward(loss)
    return loss, [x.grad for x in leaves]


def fd_check(fn, values, tol=1e-3):
    arrays_ = [np.array(v, dtype=np.float64) for v in values]
    _, analytic = grad_of(fn, *arrays_)

    def loss():
        with T.no_grad():
            return fn(*[T.Tensor(a) for a in arrays_]).item()

    numeric = finite_difference_gradient(loss, arrays_)
    return max_relative_error(analytic, numeric)


def test_softmax_symmetric():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)


def test_hinge_values_and_slopes():
    for x, val, slope in ((-2.0, 0.0, 0.0), (3.0, 3.0, 1.0)):
        out, (g,) = grad_of(lambda a: T.sum(T.maximum(a, 0.0)), [x])
        assert out.item() == val and g[0] == slope


def test_log_softmax_extreme_logits():
    out = T.log_softmax(T.Tensor([1e9, 0.0, 0.0])).data
    assert out[0] == pytest.approx(0.0, abs=1e-12)
    assert out[1] == pytest.approx(-1e9, rel=1e-12)


def test_stop_gradient_cuts_one_branch():
    _, (g,) = grad_of(lambda x: T.sum(x * T.stop_gradient(x)), [3.0])
    assert g[0] == 3.0


def test_stop_gradient_identity_and_minus_one():
    x = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(T.stop_gradient(T.Tensor(x)).data, x)
    _, (g,) = grad_of(lambda v: T.sum(T.stop_gradient(T.exp(v) * 5) - v), x)
    assert np.array_equal(g, -np.ones(7))


def test_quadratic_grad():
    _, (g,) = grad_of(lambda x: T.sum(x * x), [1.0, 2.0])
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_log_softmax_grad_identity():
    z = np.array([0.3, -1.2, 2.0, 0.1])
    k = 2
    pick = lambda a: T.sum(T.take_last(T.reshape(T.log_softmax(a), (1, 4)), np.array([k])))
    _, (g,) = grad_of(pick, z)
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    np.testing.assert_allclose(g, np.eye(4)[k] - p, atol=1e-12)


def test_backward_errors():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.fresh_tape():
        y = x * 2.0
        with pytest.raises(T.ShapeError):
            T.backward(y)
    with T.fresh_tape(), pytest.raises(T.TensorError, match="empty tape"):
        T.backward(T.Tensor(1.0))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.add(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4,))))
    assert "add" in str(exc.value) and "(2, 3)" in str(exc.value)
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((2, 3))))


def test_non_finite_raises_numeric_error():
    with pytest.raises(T.NumericError, match="log"):
        T.log(T.Tensor([0.0]))
    with pytest.raises(T.NumericError):
        T.div(T.Tensor([1.0]), T.Tensor([0.0]))


@pytest.mark.parametrize("seed", range(5))
def test_mlp_finite_difference(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 5))
    w1, w2, w3 = rng.normal(size=(5, 6)), rng.normal(size=(6, 6)), rng.normal(size=(6, 3))
    b1 = rng.normal(size=6) * 0.1

    def f(a, b, c, d):
        h = T.relu(T.matmul(T.Tensor(x), a) + d)
        h = T.exp(T.matmul(h, b) * 0.1)
        return T.mean(T.log_softmax(T.matmul(h, c)))

    assert fd_check(f, [w1, w2, w3, b1]) < 1e-3


OPS = {
    "add": lambda a, b: T.sum(T.add(a, b) * T.Tensor([1.0, 2.0, 3.0])),
    "sub": lambda a, b: T.sum(T.sub(a, b) ** 2),
    "mul": lambda a, b: T.sum(a * b * a),
    "div": lambda a, b: T.sum(a / (T.exp(b) + 1.0)),
    "power": lambda a, b: T.sum(T.power(T.exp(a), 1.5) + b),
    "log": lambda a, b: T.sum(T.log(T.exp(a) + T.exp(b))),
    "softmax": lambda a, b: T.sum(T.softmax(a) * b),
    "log_softmax": lambda a, b: T.sum(T.log_softmax(a) * T.exp(b)),
    "entropy": lambda a, b: T.entropy_from_logits(a * b),
    "minimum": lambda a, b: T.sum(T.minimum(a, b) * a),
    "clip": lambda a, b: T.sum(T.clip(a, -0.5, 0.5) * b),
    "masked_sum": lambda a, b: T.masked_sum(a * b, np.array([1.0, 0.0, 1.0])),
    "mean": lambda a, b: T.mean(a * b),
    "reshape_transpose": lambda a, b: T.sum(T.transpose(T.reshape(a, (3, 1))) * b),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(5))
def test_op_vjp_matches_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=3), rng.normal(size=3)
    if name in ("minimum", "clip"):  # keep away from kinks
        a = np.array([-1.3, 0.2, 1.1]) + 0.01 * seed
        b = np.array([0.4, -0.7, 1.6])
    assert fd_check(OPS[name], [a, b]) < 1e-3


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_and_embedding_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ids = np.array([[0, 2, 2], [1, 0, 3]])

    def f(w, g, b):
        e = T.embedding(w, ids)
        return T.sum(T.layer_norm(e, g, b) * T.Tensor(rng_fixed))

    rng_fixed = np.random.default_rng(100 + seed).normal(size=(2, 3, 5))
    assert fd_check(f, [rng.normal(size=(4, 5)), 1 + 0.1 * rng.normal(size=5),
                        rng.normal(size=5)]) < 1e-3


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 12), elements=floats))
def test_entropy_matches_oracle_and_bounds(z):
    h = T.entropy_from_logits(T.Tensor(z)).item()
    assert h == pytest.approx(oracle_entropy(z), abs=1e-10)
    assert -1e-12 <= h <= np.log(z.size) + 1e-12


def test_backward_deterministic_across_tapes():
    rng = np.random.default_rng(3)
    w, x = rng.normal(size=(6, 4)), rng.normal(size=(5, 6))
    f = lambda a: T.sum(T.softmax(T.matmul(T.Tensor(x), a)) ** 2)
    g1 = grad_of(f, w)[1][0]
    g2 = grad_of(f, w)[1][0]
    assert np.array_equal(g1, g2)


def test_no_grad_records_nothing():
    x = T.Tensor([1.0], requires_grad=True)
    with T.fresh_tape() as tape, T.no_grad():
        y = x * 2.0
    assert len(tape) == 0 and not y.requires_grad


def test_tape_reset_after_backward():
    x = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.fresh_tape() as tape:
        T.backward(T.sum(x * x))
        assert len(tape) == 0
