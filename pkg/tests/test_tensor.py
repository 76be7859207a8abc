import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unigen import tensor as T
from unigen.tensor import NonFiniteError, ShapeError, Tensor, grad_check


def leaf(a):
    return Tensor(a, requires_grad=True)


def test_softmax_of_equal_logits_is_uniform():
    y = T.softmax(Tensor([[0.0, 0.0, 0.0]])).data
    np.testing.assert_allclose(y, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_matmul_identity(rng):
    A = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(A)).data, A)


def test_grad_of_sum_of_squares():
    x = leaf([1.0, 2.0])
    T.sum_all(T.mul(x, x)).backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)
    # and the same numbers from central differences
    assert grad_check(lambda: T.sum_all(T.mul(x, x)), [x], h=1e-5) <= 1e-8


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_no_implicit_broadcast():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    with pytest.raises(ShapeError):
        T.add_vec(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_non_finite_result_rejected():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        T.scale(Tensor([1e308]), 10.0)
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])


def test_no_grad_records_nothing():
    x = leaf([1.0, 2.0])
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y._parents == ()


def test_gradients_absent_means_zero():
    a, b = leaf([1.0]), leaf([2.0])
    g = T.gradients(T.sum_all(T.mul(a, a)), {"a": a, "b": b})
    assert set(g) == {"a"}


def test_quadratic_form_grad_check(rng):
    A = rng.standard_normal((4, 4))
    x = leaf(rng.standard_normal((1, 4)))
    f = lambda: T.sum_all(T.mul(T.matmul(x, Tensor(A)), x))  # noqa: E731
    assert grad_check(f, [x]) <= 1e-8


def test_grad_check_catches_wrong_gradient():
    x = leaf([0.3, -0.7])
    f = lambda: T.sum_all(T.mul(x, x))  # noqa: E731
    err = grad_check(f, [x], analytic=lambda: [2 * x.data + 1.0])
    assert err >= 0.1


def test_grad_check_rejects_bad_step():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: T.sum_all(x), [x], h=0.0)


# ---------------------------------------------------------------------------
# every differentiable op against central differences on inputs in [-1, 1]


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _ops(rng):
    w = _u(rng, 4, 3)
    idx = np.array([2, 0, 2, 1])
    cos, sin = np.cos(_u(rng, 3, 2) * 3), np.sin(_u(rng, 3, 2) * 3)
    mask = np.array([[True, True, False, True]])
    tgt = _u(rng, 2, 3, 4)
    return {
        "matmul": lambda x: T.matmul(x, Tensor(w)),
        "matmul_w": lambda x: T.matmul(Tensor(_u(np.random.default_rng(1), 2, 5, 3)), T.reshape(x, (3, 8))),
        "bmm": lambda x: T.bmm(x, T.transpose(x)),
        "add_sub_mul": lambda x: T.mul(T.sub(x, T.scale(x, 0.3)), T.add(x, x)),
        "add_vec": lambda x: T.add_vec(x, T.reshape(T.slice_axis(T.reshape(x, (6, 4)), 0, 1, 0), (4,))),
        "mul_vec_sample": lambda x: T.mul_vec(x, T.mean(x, 1)),
        "gelu": T.gelu,
        "silu": T.silu,
        "mean_var": lambda x: T.add(T.mean(x, 2), T.var(x, 2)),
        "softmax": lambda x: T.mul(T.softmax(x), T.softmax(x)),
        "softmax_masked": lambda x: T.softmax(T.reshape(x, (6, 4)), mask),
        "layer_norm": lambda x: T.mul(T.layer_norm(x), Tensor(tgt)),
        "concat_slice": lambda x: T.concat([T.slice_axis(x, 1, 3, 1), T.slice_axis(x, 0, 1, 1)], 1),
        "gather": lambda x: T.gather_rows(T.reshape(x, (6, 4)), idx),
        "scatter": lambda x: T.scatter_rows(T.reshape(x, (6, 4)), np.array([0, 2, 2, 1, 0, 3]), 4),
        "heads": lambda x: T.merge_heads(T.mul(T.split_heads(x, 2), T.split_heads(x, 2)), 2),
        "rope": lambda x: T.rope(x, cos, sin),
        "mse": lambda x: T.mse(x, tgt),
    }


@pytest.mark.parametrize("replay", [False, True])
@pytest.mark.parametrize("name", list(_ops(np.random.default_rng(0))))
def test_op_gradients(name, replay, rng):
    op = _ops(rng)[name]
    x = leaf(_u(rng, 2, 3, 4))

    def f():
        y = op(x)
        probe = np.random.default_rng(7).uniform(-1.0, 1.0, y.shape)
        return T.sum_all(T.mul(y, Tensor(probe)))

    assert grad_check(f, [x], h=1e-5, replay=replay) <= 1e-6


def test_replay_matches_direct_evaluation(rng):
    # same numeric derivatives, so the same error against a deliberately wrong gradient
    w = leaf(_u(rng, 3, 3))
    x = Tensor(_u(rng, 2, 4, 3))
    f = lambda: T.sum_all(T.gelu(T.layer_norm(T.matmul(x, w))))  # noqa: E731
    wrong = lambda: [np.zeros((3, 3))]  # noqa: E731
    direct = grad_check(f, [w], analytic=wrong)
    assert direct > 0.01
    assert grad_check(f, [w], analytic=wrong, replay=True) == direct


def test_softmax_rows_sum_to_one(rng):
    y = T.softmax(Tensor(rng.standard_normal((50, 17)) * 10)).data
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_scatter_is_adjoint_of_gather(n, d, m, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, d))
    y = r.standard_normal((m, d))
    idx = r.integers(0, n, m)
    lhs = float((T.gather_rows(Tensor(x), idx).data * y).sum())
    rhs = float((x * T.scatter_rows(Tensor(y), idx, n).data).sum())
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs))


def test_gather_and_scatter_reject_bad_indices():
    with pytest.raises(ShapeError):
        T.gather_rows(Tensor(np.zeros((3, 2))), [3])
    with pytest.raises(ShapeError):
        T.scatter_rows(Tensor(np.zeros((2, 2))), [0, 5], 3)


def test_backward_accumulates_over_shared_subgraphs():
    x = leaf([3.0])
    y = T.mul(x, x)
    T.sum_all(T.add(y, y)).backward()
    np.testing.assert_allclose(x.grad, [12.0])
