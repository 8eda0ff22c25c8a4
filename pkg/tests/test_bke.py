import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cssl import tensor as tn
from cssl.bke import (
    AffinityError,
    ConfigError,
    TokenBatch,
    bke_target,
    ensemble_closed_form,
    loss_fd,
    normalize_affinity,
    propagate_iterative,
    similarity_matrix,
)
from cssl.tensor import Tensor


def _random_affinity(rng, b, t):
    return normalize_affinity(rng.uniform(-1, 1, size=(b, t, t)))


# -- similarity ---------------------------------------------------------------------
def test_similarity_orthonormal_is_identity():
    p = np.eye(3)[None]
    np.testing.assert_allclose(similarity_matrix(p, p), np.eye(3)[None])


def test_similarity_parallel_tokens_all_ones():
    p = np.tile([0.6, 0.8], (1, 4, 1))
    np.testing.assert_allclose(similarity_matrix(p, p), np.ones((1, 4, 4)))


def test_similarity_hand_example():
    t = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    s = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    np.testing.assert_array_equal(similarity_matrix(t, s), [[[0, 1], [1, 0]]])


def test_similarity_zero_token_named():
    t = np.ones((2, 3, 2))
    t[1, 2] = 0
    with pytest.raises(AffinityError, match="token 2 of batch element 1"):
        similarity_matrix(t, np.ones((2, 3, 2)))


def test_similarity_range():
    rng = np.random.default_rng(0)
    a = similarity_matrix(rng.normal(size=(3, 5, 4)), rng.normal(size=(3, 5, 4)))
    assert np.all(np.abs(a) <= 1 + 1e-12)


def test_token_batch_role_checked():
    with pytest.raises(ValueError):
        TokenBatch(np.zeros((1, 2, 2)), role="bystander")


# -- normalisation ------------------------------------------------------------------
def test_normalize_t2_is_permutation():
    out = normalize_affinity(np.random.default_rng(0).normal(size=(3, 2, 2)))
    np.testing.assert_array_equal(out, np.tile([[0.0, 1.0], [1.0, 0.0]], (3, 1, 1)))


def test_normalize_uniform_off_diagonal():
    out = normalize_affinity(np.full((1, 4, 4), 0.3))
    expected = (np.ones((4, 4)) - np.eye(4)) / 3
    np.testing.assert_allclose(out[0], expected)


def test_normalize_hand_softmax():
    raw = np.array([[[9.0, 0.0, np.log(2)], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]])
    out = normalize_affinity(raw)
    np.testing.assert_allclose(out[0, 0], [0.0, 1 / 3, 2 / 3], rtol=1e-6)


def test_normalize_rejects_single_token():
    with pytest.raises(AffinityError):
        normalize_affinity(np.ones((1, 1, 1)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(2, 9), st.integers(0, 10**6))
def test_normalize_rows_stochastic_with_zero_diagonal(b, t, seed):
    out = normalize_affinity(np.random.default_rng(seed).uniform(-1, 1, (b, t, t)))
    assert np.all(out[:, np.arange(t), np.arange(t)] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


# -- propagation --------------------------------------------------------------------
def test_iterative_omega_zero_returns_teacher():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(2, 3, 4))
    q = propagate_iterative(_random_affinity(rng, 2, 3), p, 0.0, 5, allow_boundary=True)
    np.testing.assert_array_equal(q, p)


def test_iterative_single_step_is_weighted_sum():
    rng = np.random.default_rng(1)
    a, p = _random_affinity(rng, 2, 4), rng.normal(size=(2, 4, 3))
    np.testing.assert_allclose(propagate_iterative(a, p, 0.3, 1), 0.3 * a @ p + 0.7 * p)


def test_iterative_hand_example():
    a = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    p = np.array([[[2.0, 0.0], [0.0, 4.0]]])  # rows a, b
    q = propagate_iterative(a, p, 0.5, 1)
    np.testing.assert_allclose(q[0], [[1.0, 2.0], [1.0, 2.0]])


def test_omega_outside_range_rejected():
    a, p = np.ones((1, 2, 2)) - np.eye(2), np.ones((1, 2, 2))
    for omega in (0.0, 1.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            propagate_iterative(a, p, omega, 3)
        with pytest.raises(ConfigError):
            ensemble_closed_form(a, p, omega)


def test_closed_form_constant_teacher_fixed_point():
    a = normalize_affinity(np.zeros((1, 5, 5)))
    p = np.tile([1.0, -2.0, 3.0], (1, 5, 1))
    np.testing.assert_allclose(ensemble_closed_form(a, p, 0.5), p, atol=1e-12)


def test_closed_form_hand_example():
    a = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    pa, pb = np.array([3.0, 0.0]), np.array([0.0, 6.0])
    q = ensemble_closed_form(a, np.stack([pa, pb])[None], 0.5)
    np.testing.assert_allclose(q[0], [(2 * pa + pb) / 3, (pa + 2 * pb) / 3], atol=1e-12)


def test_closed_form_matches_long_iteration():
    rng = np.random.default_rng(7)
    for _ in range(10):
        t = int(rng.choice([2, 4, 8]))
        a, p = _random_affinity(rng, 3, t), rng.normal(size=(3, t, 16))
        diff = np.max(np.abs(ensemble_closed_form(a, p, 0.5) - propagate_iterative(a, p, 0.5, 200)))
        assert diff < 1e-8


def test_geometric_series_identity():
    rng = np.random.default_rng(2)
    a, p = _random_affinity(rng, 2, 5), rng.normal(size=(2, 5, 3))
    w = 0.6
    for t in range(1, 11):
        wa_t = np.linalg.matrix_power(w * a, t)
        series = sum(np.linalg.matrix_power(w * a, i) for i in range(t))
        direct = wa_t @ p + (1 - w) * series @ p
        np.testing.assert_allclose(propagate_iterative(a, p, w, t), direct, atol=1e-6)


def test_convergence_is_geometric_and_monotone():
    rng = np.random.default_rng(3)
    w = 0.5
    for _ in range(10):
        a, p = _random_affinity(rng, 2, 6), rng.normal(size=(2, 6, 4))
        q_star = ensemble_closed_form(a, p, w)
        errs = [np.max(np.abs(propagate_iterative(a, p, w, t) - q_star)) for t in range(1, 16)]
        c = errs[0] / w
        for t, e in enumerate(errs, start=1):
            assert e <= c * w**t * (1 + 1e-9) + 1e-15
        assert all(later <= earlier for earlier, later in zip(errs[1:], errs[2:]))


def test_closed_form_preserves_teacher_dtype():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(1, 4, 3)).astype(np.float32)
    assert ensemble_closed_form(_random_affinity(rng, 1, 4), p, 0.5).dtype == np.float32


def test_bke_target_is_plain_array():
    rng = np.random.default_rng(0)
    teacher = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    student = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    q = bke_target(teacher, student, 0.5)
    assert isinstance(q, np.ndarray) and q.shape == (2, 4, 3)


# -- L_FD ---------------------------------------------------------------------------
def _scalar_loss_fd(target, student, gamma):
    """Loop-by-loop reimplementation of the distillation loss."""
    b, t, e = student.shape
    total = 0.0
    for i in range(b):
        per = 0.0
        for c in range(e):
            mt = sum(target[i, k, c] for k in range(t)) / t
            ms = sum(student[i, k, c] for k in range(t)) / t
            vt = sum((target[i, k, c] - mt) ** 2 for k in range(t)) / t
            vs = sum((student[i, k, c] - ms) ** 2 for k in range(t)) / t
            per += gamma * (mt - ms) ** 2 + (np.sqrt(vt + 1e-12) - np.sqrt(vs + 1e-12)) ** 2
        total += per
    return total / b


def test_loss_fd_identity_zero():
    p = np.random.default_rng(0).normal(size=(2, 4, 3))
    assert loss_fd(p, p, 2.0).item() == pytest.approx(0.0, abs=1e-6)


def test_loss_fd_scripted_oracle():
    rng = np.random.default_rng(9)
    target, student = rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 4, 3))
    with tn.precision(np.float64):
        value = loss_fd(target, student, 1.5).item()
    assert value == pytest.approx(_scalar_loss_fd(target, student, 1.5), rel=1e-12)


def test_loss_fd_translation_affects_mean_term_only():
    rng = np.random.default_rng(1)
    target, student = rng.normal(size=(1, 5, 2)), rng.normal(size=(1, 5, 2))
    c = np.array([0.5, -1.0])
    with tn.precision(np.float64):
        base0 = loss_fd(target, student, 0.0).item()
        moved0 = loss_fd(target, student + c, 0.0).item()
    assert moved0 == pytest.approx(base0, abs=1e-12)


def test_loss_fd_gradient_reaches_student_only():
    rng = np.random.default_rng(0)
    teacher = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    student = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    tn.backward(loss_fd(bke_target(teacher, student, 0.5), student, 2.0))
    assert teacher.grad is None
    assert student.grad is not None and np.any(student.grad != 0)


def test_loss_fd_gradient_finite_differences():
    rng = np.random.default_rng(4)
    target = rng.normal(size=(2, 6, 3))
    err = tn.finite_diff_check(lambda s: loss_fd(target, s, 2.0), rng.uniform(-2, 2, (2, 6, 3)), eps=1e-5)
    assert err < 1e-4


def test_loss_fd_with_grid_layout():
    rng = np.random.default_rng(2)
    target, student = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 4, 3))
    assert loss_fd(target, student, 1.0, layout=(2, 2)).item() == pytest.approx(loss_fd(target, student, 1.0).item())


def test_loss_fd_shape_mismatch():
    with pytest.raises(tn.DimensionError):
        loss_fd(np.zeros((1, 4, 3)), np.zeros((1, 3, 3)), 1.0)
