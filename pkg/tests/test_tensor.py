import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_diff, max_rel_err
from sefoss.tensor import (DegenerateInputError, GraphError, ShapeError, Tensor, add, backward,
                           corrupted_adjoint, elementwise, grad_check, matmul, max_with_constant,
                           reduce_sum, relu, row_cosine, row_log_sum_exp, scale, square)

# log(e + e^2 + e^3) at 40 digits (mpmath)
LSE_123 = 3.407605964444380304482919904545070451473
LN10 = 2.302585092994045684017991454684364207601

finite = st.floats(-50, 50, allow_nan=False)


def grads_of(fn, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    return [t.grad for t in leaves]


# --- matmul ------------------------------------------------------------------

def test_matmul_identity_and_zero():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(a)).values, a)
    np.testing.assert_array_equal(matmul(Tensor(a), Tensor(np.zeros((2, 3)))).values, np.zeros((2, 3)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(2, 4))
    ga, gb = grads_of(lambda x, y: reduce_sum(matmul(x, y)), a, b)
    na = central_diff(lambda x: (x @ b).sum(), a)
    nb = central_diff(lambda y: (a @ y).sum(), b)
    assert max_rel_err(ga, na) < 1e-6
    assert max_rel_err(gb, nb) < 1e-6


# --- log-sum-exp -------------------------------------------------------------

def test_lse_uniform_row_is_log_c():
    out = row_log_sum_exp(Tensor(np.zeros((1, 10)))).item()
    assert abs(out - LN10) < 1e-12


def test_lse_single_column():
    assert row_log_sum_exp(Tensor([[-7.25]])).item() == -7.25


def test_lse_against_extended_precision():
    assert abs(row_log_sum_exp(Tensor([[1.0, 2.0, 3.0]])).item() - LSE_123) < 1e-12


def test_lse_large_logits_stay_finite():
    out = row_log_sum_exp(Tensor([[1000.0, 1000.0]])).item()
    assert abs(out - (1000.0 + np.log(2.0))) < 1e-9


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-100, 100))
def test_lse_shift_property(rows, c):
    base = row_log_sum_exp(Tensor(rows)).values
    shifted = row_log_sum_exp(Tensor(rows + c)).values
    np.testing.assert_allclose(shifted, base + c, rtol=0, atol=1e-12 * max(1.0, abs(c), np.abs(rows).max()))


def test_lse_gradient_is_softmax():
    v = np.array([[0.3, -1.2, 2.0, 0.1]])
    (g,) = grads_of(lambda x: reduce_sum(row_log_sum_exp(x)), v)
    assert max_rel_err(g, central_diff(lambda x: np.log(np.exp(x).sum()), v)) < 1e-8


# --- cosine ------------------------------------------------------------------

def test_cosine_self_and_orthogonal():
    a = np.array([[1.0, 2.0, -3.0], [0.5, 0.0, 4.0]])
    np.testing.assert_allclose(row_cosine(Tensor(a), Tensor(a)).values, 1.0, atol=1e-15)
    o = row_cosine(Tensor([[1.0, 0.0, 0.0]]), Tensor([[0.0, 2.0, 0.0]]))
    assert o.item() == 0.0


def test_cosine_zero_row_raises():
    with pytest.raises(DegenerateInputError):
        row_cosine(Tensor([[0.0, 0.0]]), Tensor([[1.0, 1.0]]))


def test_cosine_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))

    def cos_sum(x, y):
        return np.sum((x * y).sum(1) / (np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)))

    ga, gb = grads_of(lambda x, y: reduce_sum(row_cosine(x, y)), a, b)
    assert max_rel_err(ga, central_diff(lambda x: cos_sum(x, b), a)) < 1e-6
    assert max_rel_err(gb, central_diff(lambda y: cos_sum(a, y), b)) < 1e-6


# --- elementwise -------------------------------------------------------------

def test_relu_sign_cases():
    np.testing.assert_array_equal(relu(Tensor([[-1.0, 0.0, 2.0]])).values, [[0.0, 0.0, 2.0]])


def test_relu_subgradient_at_zero_is_zero():
    (g,) = grads_of(lambda x: reduce_sum(relu(x)), np.array([[-1.0, 0.0, 2.0]]))
    np.testing.assert_array_equal(g, [[0.0, 0.0, 1.0]])


def test_max_with_constant():
    np.testing.assert_array_equal(max_with_constant(Tensor([[-1.0, 3.0]]), 0.0).values, [[0.0, 3.0]])
    np.testing.assert_array_equal(elementwise(Tensor([[-1.0, 3.0]]), "max_with_constant").values,
                                  [[0.0, 3.0]])


def test_square_backward_at_two():
    (g,) = grads_of(lambda x: reduce_sum(square(x)), np.array([[2.0]]))
    assert g[0, 0] == 4.0
    num = central_diff(lambda x: float((x ** 2).sum()), np.array([[2.0]]))
    assert abs(num[0, 0] - 4.0) < 1e-8


def test_elementwise_dispatch():
    a = Tensor([[1.0, -2.0]])
    np.testing.assert_array_equal(elementwise(a, "add", Tensor([[1.0, 1.0]])).values, [[2.0, -1.0]])
    np.testing.assert_array_equal(elementwise(a, "sub", Tensor([[1.0, 1.0]])).values, [[0.0, -3.0]])
    np.testing.assert_array_equal(elementwise(a, "scale", 3.0).values, [[3.0, -6.0]])
    np.testing.assert_array_equal(elementwise(a, "square").values, [[1.0, 4.0]])
    with pytest.raises(ValueError):
        elementwise(a, "tanh")


def test_add_shape_mismatch():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_bias_broadcast_gradient_sums_rows():
    x = Tensor(np.ones((3, 2)))
    b = Tensor(np.zeros((1, 2)), requires_grad=True)
    backward(reduce_sum(add(x, b)))
    np.testing.assert_array_equal(b.grad, [[3.0, 3.0]])


# --- backward ----------------------------------------------------------------

def test_backward_needs_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        backward(scale(x, 2.0))


def test_root_independent_of_leaf_gives_no_gradient():
    x = Tensor([[1.0]], requires_grad=True)
    y = Tensor([[2.0]], requires_grad=True)
    backward(reduce_sum(square(y)))
    assert x.grad is None or x.grad[0, 0] == 0.0


def test_root_equal_to_leaf_gives_one():
    x = Tensor([[5.0]], requires_grad=True)
    backward(x)
    assert x.grad[0, 0] == 1.0


def test_detached_branch_contributes_nothing():
    x = Tensor([[3.0]], requires_grad=True)
    y = add(square(x), x.detach())
    backward(reduce_sum(y))
    assert x.grad[0, 0] == 6.0


def test_graph_is_single_use():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    mid = square(x)
    root = reduce_sum(mid)
    backward(root)
    with pytest.raises(GraphError):
        backward(root)
    with pytest.raises(GraphError):
        reduce_sum(mid)


def test_leaves_survive_for_new_graphs():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    backward(reduce_sum(square(x)))
    x.zero_grad()
    backward(reduce_sum(x))
    np.testing.assert_array_equal(x.grad, [[1.0, 1.0]])


def test_shared_subexpression_accumulates():
    x = Tensor([[1.5]], requires_grad=True)
    s = square(x)
    backward(reduce_sum(add(s, s)))
    assert x.grad[0, 0] == 6.0


def test_forward_is_bit_identical():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    first = row_log_sum_exp(matmul(Tensor(a), Tensor(b))).values
    again = row_log_sum_exp(matmul(Tensor(a), Tensor(b))).values
    assert np.array_equal(first, again)


# --- grad_check --------------------------------------------------------------

def test_grad_check_linear_loss():
    x = np.array([[0.5, -1.0, 2.0]]).T
    err = grad_check(lambda p: reduce_sum(matmul(p["w"], Tensor(x))), {"w": np.array([[1.0, 2.0, 3.0]])})
    assert err < 1e-9


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda p: reduce_sum(p["w"]), {"w": np.ones((1, 1))}, eps=0.0)


def _primitive_losses(rng):
    a = rng.normal(size=(3, 4))
    a = np.where(np.abs(a) < 0.1, 0.5, a)  # keep relu and hinge away from their kinks
    b = rng.normal(size=(4, 2))
    c = rng.normal(size=(3, 4))
    return {
        "matmul": (lambda p: reduce_sum(matmul(p["a"], p["b"])), {"a": a, "b": b}),
        "lse": (lambda p: reduce_sum(row_log_sum_exp(p["a"])), {"a": a}),
        "cosine": (lambda p: reduce_sum(row_cosine(p["a"], p["c"])), {"a": a, "c": c}),
        "relu": (lambda p: reduce_sum(square(relu(p["a"]))), {"a": a}),
        "square": (lambda p: reduce_sum(square(p["a"])), {"a": a}),
        "hinge": (lambda p: reduce_sum(square(max_with_constant(p["a"], 0.0))), {"a": a}),
    }


@pytest.mark.parametrize("seed", range(100))
def test_every_primitive_passes_grad_check(seed):
    for name, (fn, params) in _primitive_losses(np.random.default_rng(seed)).items():
        assert grad_check(fn, params) < 1e-5, name


@pytest.mark.parametrize("op", ["square", "relu", "matmul", "row_log_sum_exp", "row_cosine",
                                "max_with_constant"])
def test_corrupted_adjoint_is_caught(op):
    fns = _primitive_losses(np.random.default_rng(0))
    key = {"row_log_sum_exp": "lse", "row_cosine": "cosine", "max_with_constant": "hinge"}.get(op, op)
    fn, params = fns[key]
    with corrupted_adjoint(op):
        assert grad_check(fn, params) > 1e-2
    assert grad_check(fn, params) < 1e-5
