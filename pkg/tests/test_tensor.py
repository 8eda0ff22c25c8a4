import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import gradcases
from cssl import tensor as tn
from cssl.tensor import DimensionError, GradientError, SingularMatrixError, Tensor


# -- forward values -------------------------------------------------------------
def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    out = tn.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_row_softmax_symmetric():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_inverse_diagonal():
    out = tn.inverse(Tensor([[2.0, 0.0], [0.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.0], [0.0, 0.25]], atol=1e-7)


def test_inverse_matches_identity_for_well_conditioned():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a = rng.normal(size=(5, 5)) + 5 * np.eye(5)
        assert np.linalg.cond(a) < 1e3
        inv = tn.inverse(Tensor(a, dtype=np.float64)).data
        assert np.max(np.abs(a @ inv - np.eye(5))) < 1e-5


def test_inverse_batched():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4, 4)) + 4 * np.eye(4)
    inv = tn.inverse(Tensor(a, dtype=np.float64)).data
    np.testing.assert_allclose(inv, np.linalg.inv(a), atol=1e-10)


def test_inverse_pivoting_needed():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(tn.inverse(Tensor(a, dtype=np.float64)).data, a)


def test_inverse_singular_reports_condition():
    with pytest.raises(SingularMatrixError) as exc:
        tn.inverse(Tensor([[1.0, 2.0], [2.0, 4.0]], dtype=np.float64))
    assert exc.value.condition > 1e12 or np.isinf(exc.value.condition)


def test_inverse_is_not_recorded():
    a = Tensor(np.eye(3) * 2, requires_grad=True)
    out = tn.inverse(a)
    assert not out.requires_grad


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_add_shape_error():
    with pytest.raises(DimensionError, match="add"):
        tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_softmax_masked_positions_exact_zero():
    x = Tensor([[1.0, 2.0, 3.0], [0.5, -1.0, 4.0]])
    mask = np.array([[True, False, True], [False, True, True]])
    out = tn.softmax(x, mask=mask).data
    assert out[0, 1] == 0.0 and out[1, 0] == 0.0
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (4, 6), elements=st.floats(-20, 20)), st.integers(0, 2**31 - 1))
def test_softmax_rows_are_distributions(x, seed):
    mask = np.random.default_rng(seed).random(x.shape) < 0.6
    mask[:, 2] = True
    out = tn.softmax(Tensor(x), mask=mask).data
    assert np.all(out >= 0)
    assert np.all(out[~mask] == 0.0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


def test_sum_and_mean_accumulate_in_float64():
    x = Tensor(np.full(10**6, 0.1, dtype=np.float32))
    assert abs(tn.sum(x).item() - 1e5) < 1.0
    assert x.dtype == np.float32 and tn.mean(x).dtype == np.float32


def test_gather_and_concat_values():
    a = Tensor(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(tn.gather(a, [3, 0], axis=0).data, [[9, 10, 11], [0, 1, 2]])
    c = tn.concat([a, a], axis=1)
    assert c.shape == (4, 6)


def test_reshape_rejects_wrong_size():
    with pytest.raises(DimensionError, match="reshape"):
        tn.reshape(Tensor(np.ones(6)), (4, 2))


def test_default_dtype_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with tn.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert tn.default_dtype() == np.float32


# -- backward -----------------------------------------------------------------------
def test_backward_sum_linear():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tn.backward(tn.sum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    tn.backward(tn.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_mean():
    x = Tensor(np.ones(4), requires_grad=True)
    tn.backward(tn.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_returns_map_and_accumulates_fan_out():
    x = Tensor([3.0], requires_grad=True)
    y = x * x + x  # x used three times
    grads = tn.backward(tn.sum(y))
    np.testing.assert_allclose(grads[id(x)], [7.0])
    np.testing.assert_allclose(x.grad, [7.0])


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GradientError, match="scalar"):
        tn.backward(x * x)


def test_backward_rejects_reuse_of_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = tn.sum(x * x)
    tn.backward(loss)
    with pytest.raises(GradientError, match="consumed"):
        tn.backward(loss)


def test_backward_needs_grad_path():
    with pytest.raises(GradientError):
        tn.backward(tn.sum(Tensor([1.0])))


def test_tape_is_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    loss = tn.sum(tn.relu(x @ w) + x)
    tape = tn.GradTape.from_output(loss)
    for i, parents in enumerate(tape.parents):
        assert all(j < i for j in parents)
    assert {id(n) for n in tape.leaves} == {id(x), id(w)}


def test_no_grad_skips_recording():
    x = Tensor([1.0], requires_grad=True)
    with tn.no_grad():
        y = x * x
    assert not y.requires_grad
    assert (x * x).requires_grad


def test_no_graph_when_no_input_needs_grad():
    y = Tensor([1.0]) * Tensor([2.0])
    assert not y.requires_grad and y._parents == ()


# -- finite differences -------------------------------------------------------------
def test_finite_diff_square_example():
    err = tn.finite_diff_check(lambda t: tn.sum(tn.square(t)), Tensor([1.0, 2.0, 3.0]), eps=1e-4)
    assert err < 1e-5


def test_finite_diff_linear_is_exact():
    x = np.random.default_rng(1).uniform(-2, 2, size=7)
    assert tn.finite_diff_check(lambda t: tn.sum(t), x, eps=1e-3) < 1e-9


def test_finite_diff_eps_range():
    with pytest.raises(ValueError):
        tn.finite_diff_check(lambda t: tn.sum(t), np.ones(2), eps=1e-7)
    with pytest.raises(ValueError):
        tn.finite_diff_check(lambda t: tn.sum(t), np.ones(2), eps=0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_propagates_non_finite():
    with pytest.raises(FloatingPointError):
        tn.finite_diff_check(lambda t: tn.sum(tn.sqrt(t)), np.array([1.0, 0.0]), eps=1e-3)


@pytest.mark.parametrize("op", gradcases.OPS + gradcases.COMPOSITES)
def test_gradient_matches_finite_differences(op):
    worst = max(gradcases.max_error(op, seed) for seed in gradcases.SEEDS)
    assert worst < gradcases.TOL
