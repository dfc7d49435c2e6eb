import numpy as np
import pytest

from transdrop.autodiff import DomainError, ShapeError, Tape, backward, finite_diff_check


def grad_of(build, *values):
    """Analytic gradient of ``build(tape, *leaves)`` with respect to each leaf."""
    tape = Tape()
    leaves = [tape.var(v) for v in values]
    root = build(tape, *leaves)
    table = backward(tape, root)
    return float(root.value), [table[l.id] for l in leaves]


def numeric_check(build, value, step=1e-6):
    value = np.asarray(value, dtype=np.float64)

    def f(theta):
        val, (g,) = grad_of(build, theta.reshape(value.shape))
        return val, g.ravel()

    return finite_diff_check(f, value.ravel(), step)


def test_trivial_values():
    t = Tape()
    assert t.tanh(t.const(0.0)).value == 0.0
    assert t.sigmoid(t.const(0.0)).value == 0.5
    assert t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((3, 1)))).shape == (2, 1)


def test_power_rule_and_tanh_slope():
    _, (g,) = grad_of(lambda t, x: t.square(x), 3.0)
    assert g == 6.0
    _, (g,) = grad_of(lambda t, x: t.tanh(x), 0.0)
    assert g == 1.0


def test_product_rule():
    # d(t0 * t1) at (2, 5) = (5, 2)
    def prod(theta):
        tape = Tape()
        x = tape.var(theta)
        a = tape.sum(tape.mul(x, tape.const(np.array([1.0, 0.0]))))
        b = tape.sum(tape.mul(x, tape.const(np.array([0.0, 1.0]))))
        root = tape.mul(a, b)
        backward(tape, root)
        return float(root.value), x.grad

    _, g = prod(np.array([2.0, 5.0]))
    np.testing.assert_array_equal(g, [5.0, 2.0])
    assert finite_diff_check(prod, np.array([2.0, 5.0])) < 1e-8


def test_linear_sum_gradient_is_ones():
    theta = np.random.default_rng(0).normal(size=7)
    _, (g,) = grad_of(lambda t, x: t.sum(x), theta)
    np.testing.assert_array_equal(g, np.ones(7))
    assert numeric_check(lambda t, x: t.sum(x), theta) < 1e-8


def test_least_squares_matches_finite_differences():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 1))
    y = rng.normal(size=(4, 1))

    def build(t, W):
        r = t.sub(t.matmul(W, t.const(x)), t.const(y))
        return t.mean(t.square(r))

    assert numeric_check(build, rng.normal(size=(4, 3))) < 1e-5


UNARY = {
    "tanh": (lambda t, a: t.tanh(a), (-2, 2)),
    "sigmoid": (lambda t, a: t.sigmoid(a), (-3, 3)),
    "log": (lambda t, a: t.log(a), (0.2, 3)),
    "exp": (lambda t, a: t.exp(a), (-1, 1)),
    "square": (lambda t, a: t.square(a), (-2, 2)),
    "reciprocal": (lambda t, a: t.reciprocal(a), (0.5, 3)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitives_against_finite_differences(name):
    op, (lo, hi) = UNARY[name]
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    weights = rng.normal(size=5)
    for _ in range(10):
        x = rng.uniform(lo, hi, size=5)
        err = numeric_check(lambda t, a: t.sum(t.mul(op(t, a), t.const(weights))), x)
        assert err < 1e-5, name


BINARY = {
    "add": lambda t, a, b: t.add(a, b),
    "subtract": lambda t, a, b: t.sub(a, b),
    "multiply": lambda t, a, b: t.mul(a, b),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitives_against_finite_differences(name):
    op = BINARY[name]
    rng = np.random.default_rng(len(name))
    for _ in range(10):
        a, b = rng.normal(size=(2, 3, 2))
        w = rng.normal(size=(3, 2))
        # check both operands, including the scalar-broadcast form
        assert numeric_check(lambda t, x: t.sum(t.mul(op(t, x, t.const(b)), t.const(w))), a) < 1e-5
        assert numeric_check(lambda t, x: t.sum(t.mul(op(t, t.const(a), x), t.const(w))), b) < 1e-5
        s = rng.normal()
        assert numeric_check(lambda t, x: t.sum(t.mul(op(t, t.const(a), x), t.const(w))), s) < 1e-5


def test_matmul_reductions_and_shape_ops_against_finite_differences():
    rng = np.random.default_rng(3)
    B = rng.normal(size=(3, 4))
    w = rng.normal(size=(2, 4))
    for _ in range(10):
        A = rng.normal(size=(2, 3))
        assert numeric_check(lambda t, x: t.sum(t.mul(t.matmul(x, t.const(B)), t.const(w))), A) < 1e-5
        assert numeric_check(
            lambda t, x: t.sum(t.square(t.mean(t.matmul(t.const(A), x), axis=0, keepdims=True))), B) < 1e-5
        assert numeric_check(
            lambda t, x: t.sum(t.square(t.sum(t.reshape(x, (4, 3)), axis=1))), B) < 1e-5
        col = rng.normal(size=(2, 1))
        assert numeric_check(
            lambda t, x: t.sum(t.mul(t.broadcast(x, (2, 4)), t.const(w))), col) < 1e-5


def test_fan_out_accumulates():
    # f = x * x + x at x = 2 -> 2x + 1 = 5
    _, (g,) = grad_of(lambda t, x: t.add(t.mul(x, x), x), 2.0)
    assert g == 5.0


def test_sum_of_disjoint_terms_has_summed_gradient():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=4)

    def f1(t, x):
        return t.sum(t.tanh(x))

    def f2(t, x):
        return t.sum(t.square(x))

    _, (g1,) = grad_of(f1, x0)
    _, (g2,) = grad_of(f2, x0)
    _, (g12,) = grad_of(lambda t, x: t.add(f1(t, x), f2(t, x)), x0)
    np.testing.assert_allclose(g12, g1 + g2, rtol=1e-14)


def test_backward_is_deterministic_bitwise():
    rng = np.random.default_rng(5)
    W = rng.normal(size=(5, 3))
    x = rng.normal(size=(3, 2))

    def run():
        _, (g,) = grad_of(lambda t, w: t.mean(t.sigmoid(t.matmul(w, t.const(x)))), W)
        return g

    assert run().tobytes() == run().tobytes()


def test_unreachable_nodes_get_zero_grad():
    t = Tape()
    x = t.var(np.array([1.0, 2.0]))
    other = t.var(np.array([3.0]))
    root = t.sum(t.square(x))
    table = backward(t, root)
    np.testing.assert_array_equal(table[other.id], [0.0])
    assert other.grad.shape == other.value.shape


def test_non_scalar_root_rejected():
    t = Tape()
    x = t.var(np.ones(3))
    with pytest.raises(ShapeError):
        backward(t, t.square(x))


def test_shape_errors_name_the_op():
    t = Tape()
    with pytest.raises(ShapeError, match="matmul"):
        t.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 1))))
    with pytest.raises(ShapeError, match="add"):
        t.add(t.const(np.ones((2, 3))), t.const(np.ones((3,))))


def test_log_of_nonpositive_is_an_error():
    t = Tape()
    with pytest.raises(DomainError):
        t.log(t.const(np.array([1.0, 0.0])))


def test_node_values_are_immutable():
    t = Tape()
    x = t.var(np.ones(2))
    with pytest.raises(ValueError):
        x.value[0] = 5.0


def test_operator_sugar():
    t = Tape()
    x = t.var(np.array(2.0))
    y = 3 * x - 1 + x * x
    backward(t, y)
    assert float(y.value) == 9.0
    assert float(x.grad) == 7.0
