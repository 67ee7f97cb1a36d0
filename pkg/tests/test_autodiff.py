import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_elementwise, numeric_grad, rel_err
from mcbeam.autodiff import (
    ComplexTensor,
    DomainError,
    ShapeError,
    SingularMatrixError,
    Tape,
    Tensor,
    backward,
    complex_linear_solve,
    grad,
)
from mcbeam.autodiff import complex as cx
from mcbeam.autodiff import tensor as T


# -- forward examples ------------------------------------------------------
def test_logsumexp_of_zeros_is_log2():
    assert T.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(np.log(2.0), abs=1e-15)


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor(0.0)).item() == 0.5


def test_grad_of_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = grad((x * x).sum(), [x])
    fd = numeric_grad(lambda a: float(np.sum(a * a)), np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(fd, [2.0, 4.0, 6.0], rtol=1e-8)
    np.testing.assert_allclose(g, fd, rtol=1e-8)


def test_backward_of_constant_is_empty():
    assert backward(Tensor(3.0) * 2.0) == {}


def test_backward_identity_leaf():
    x = Tensor(1.5, requires_grad=True)
    assert backward(x)[x.node_id].item() == 1.0


def test_unreachable_leaf_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([3.0], requires_grad=True)
    g = backward(x.sum(), [x, y])
    np.testing.assert_array_equal(g[y.node_id].data, [0.0])


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


# -- errors ----------------------------------------------------------------
def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value)
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)) + Tensor(np.ones(4))
    with pytest.raises(ShapeError):
        Tensor(np.ones(6)).reshape(4, 2)


def test_log_and_sqrt_of_negative_raise():
    with pytest.raises(DomainError):
        T.log(Tensor([-1.0]))
    with pytest.raises(DomainError):
        T.sqrt(Tensor([-1e-3]))


# -- finite-difference checks per primitive -----------------------------------
def _unary_cases():
    pos = lambda r, s: r.uniform(0.5, 2.0, s)
    away = lambda r, s: r.choice([-1, 1], s) * r.uniform(0.1, 2.0, s)  # keep off kinks
    return {
        "exp": (T.exp, away),
        "log": (T.log, pos),
        "sqrt": (T.sqrt, pos),
        "sigmoid": (T.sigmoid, away),
        "tanh": (T.tanh, away),
        "relu": (T.relu, away),
        "maximum": (lambda a: T.maximum(a, 0.3), away),
        "neg": (lambda a: -a, away),
        "softmax": (lambda a: T.softmax(a, axis=-1), away),
        "log_softmax": (lambda a: T.log_softmax(a, axis=-1), away),
        "logsumexp": (lambda a: T.logsumexp(a, axis=-1), away),
        "transpose": (lambda a: a.transpose(1, 0, 2), away),
        "reshape": (lambda a: a.reshape(6, 4), away),
        "slice": (lambda a: a[1:, ::2, 1], away),
        "fancy_index": (lambda a: a[:, [0, 2, 2], :], away),
        "sum": (lambda a: a.sum(axis=1), away),
        "mean": (lambda a: a.mean(axis=(0, 2)), away),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
def test_unary_primitive_gradients(name):
    op, draw = _unary_cases()[name]
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = draw(rng, (2, 3, 4))
        w = rng.standard_normal(op(Tensor(x)).shape)  # random cotangent
        assert check_elementwise(lambda a: (op(a[0]) * w).sum(), [x]) < 1e-4


@pytest.mark.parametrize(
    "name,op",
    [
        ("add", lambda a, b: a + b),
        ("sub", lambda a, b: a - b),
        ("mul", lambda a, b: a * b),
        ("div", lambda a, b: a / b),
        ("matmul", lambda a, b: a @ b.swapaxes(-1, -2)),
        ("concat", lambda a, b: T.concat([a, b], axis=1)),
        ("stack", lambda a, b: T.stack([a, b], axis=0)),
    ],
)
def test_binary_primitive_gradients(name, op):
    for seed in range(5):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 3, 4))
        b = rng.uniform(0.5, 2.0, (3, 4)) if name in ("add", "mul", "div", "sub") else rng.uniform(0.5, 2.0, (2, 3, 4))
        w = rng.standard_normal(op(Tensor(a), Tensor(b)).shape)
        assert check_elementwise(lambda t: (op(t[0], t[1]) * w).sum(), [a, b]) < 1e-4


def test_shared_subexpression_accumulates():
    x = Tensor([0.3, -0.7], requires_grad=True)
    y = T.tanh(x)
    (g,) = grad((y * y + y).sum(), [x])
    expect = numeric_grad(lambda a: float(np.sum(np.tanh(a) ** 2 + np.tanh(a))), x.data)
    assert rel_err(g, expect) < 1e-8


def test_tape_order_is_topological():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = (T.exp(x) * x).sum()
    tape = Tape(loss)
    seen = set()
    for node in tape.nodes:  # forward (creation) order
        for p in node._parents:
            if p.requires_grad:
                assert p.node_id in seen
        seen.add(node.node_id)


def test_backward_is_bit_deterministic():
    def run():
        rng = np.random.default_rng(7)
        a = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
        loss = T.logsumexp(T.tanh(a @ a), axis=-1).sum()
        return grad(loss, [a])[0]

    assert run().tobytes() == run().tobytes()


# -- complex layer -----------------------------------------------------------
def test_complex_product_example():
    z = cx.mul(ComplexTensor.from_numpy(np.array(1 + 2j)), ComplexTensor.from_numpy(np.array(3 + 4j)))
    assert z.numpy() == -5 + 10j


def test_trace_of_identity():
    assert cx.trace(ComplexTensor.from_numpy(np.eye(2).astype(complex))).numpy() == 2 + 0j


def test_outer_product_example():
    x = ComplexTensor.from_numpy(np.array([1 + 1j, 1 - 1j]))
    np.testing.assert_array_equal(cx.outer(x).numpy(), [[2, 2j], [-2j, 2]])


def _crand(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 5))
def test_complex_algebraic_identities(seed, n):
    rng = np.random.default_rng(seed)
    a, b = _crand(rng, (n, n)), _crand(rng, (n, n))
    A, B = ComplexTensor.from_numpy(a), ComplexTensor.from_numpy(b)
    np.testing.assert_allclose(cx.herm(cx.matmul(A, B)).numpy(), cx.matmul(cx.herm(B), cx.herm(A)).numpy(), atol=1e-12)
    np.testing.assert_allclose(cx.trace(cx.matmul(A, B)).numpy(), cx.trace(cx.matmul(B, A)).numpy(), atol=1e-11)
    np.testing.assert_allclose(cx.matmul(A, B).numpy(), a @ b, atol=1e-12)
    np.testing.assert_allclose(cx.divide(A, B).numpy(), a / b, rtol=1e-10)


def test_complex_gradients_through_real_tape():
    rng = np.random.default_rng(3)
    a, b = _crand(rng, (3, 3)), _crand(rng, (3, 2))

    def loss(t):
        A, B = ComplexTensor(t[0], t[1]), ComplexTensor(t[2], t[3])
        z = cx.matmul(cx.herm(A), B)
        return cx.abs2(cx.divide(z, cx.add(ComplexTensor.real(np.full((3, 2), 3.0)), z))).sum()

    assert check_elementwise(loss, [a.real, a.imag, b.real, b.imag]) < 1e-4


# -- linear solve ----------------------------------------------------------------
def _solve(a, b):
    return complex_linear_solve(ComplexTensor.from_numpy(a), ComplexTensor.from_numpy(b)).numpy()


def test_solve_identity_and_scaled_identity():
    rng = np.random.default_rng(0)
    b = _crand(rng, (3, 2))
    np.testing.assert_allclose(_solve(np.eye(3, dtype=complex), b), b, atol=1e-15)
    np.testing.assert_allclose(_solve(2 * np.eye(2, dtype=complex), np.eye(2, dtype=complex)), 0.5 * np.eye(2), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_solve_residual_and_roundtrip(seed, n):
    rng = np.random.default_rng(seed)
    a = _crand(rng, (n, n)) + n * np.eye(n)
    x = _crand(rng, (n, 3))
    z = _solve(a, a @ x)
    np.testing.assert_allclose(z, x, atol=1e-9)
    b = _crand(rng, (n, 2))
    z = _solve(a, b)
    assert np.linalg.norm(a @ z - b) / np.linalg.norm(b) < 1e-10


def test_solve_batched_matches_numpy():
    rng = np.random.default_rng(5)
    a = _crand(rng, (4, 3, 3, 3))
    b = _crand(rng, (4, 3, 3, 2))
    np.testing.assert_allclose(_solve(a, b), np.linalg.solve(a, b), atol=1e-10)


def test_solve_pivots_past_zero_diagonal():
    a = np.array([[0, 1], [1, 0]], dtype=complex)
    b = np.array([[1], [2]], dtype=complex)
    np.testing.assert_allclose(_solve(a, b), [[2], [1]], atol=1e-15)


def test_singular_matrix_reports_frequency():
    a = np.stack([np.eye(2), np.zeros((2, 2)), np.eye(2)]).astype(complex)
    with pytest.raises(SingularMatrixError) as err:
        _solve(a, np.ones((3, 2, 1), dtype=complex))
    assert err.value.frequency == 1


def test_solve_size_limit():
    with pytest.raises(ShapeError):
        _solve(np.eye(17, dtype=complex), np.ones((17, 1), dtype=complex))


def test_solve_gradient_4x4():
    rng = np.random.default_rng(11)
    a = _crand(rng, (4, 4)) + 2 * np.eye(4)
    b = _crand(rng, (4, 2))
    w = _crand(rng, (4, 2))

    def loss(t):
        z = complex_linear_solve(ComplexTensor(t[0], t[1]), ComplexTensor(t[2], t[3]))
        return (z.re * w.real + z.im * w.imag).sum()

    assert check_elementwise(loss, [a.real, a.imag, b.real, b.imag]) < 1e-4
