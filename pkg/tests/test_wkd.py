import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cssl import tensor as tn
from cssl.tensor import DimensionError, Tensor
from oracles import gaussian_w2_squared_oracle

from cssl.wkd import (
    GaussianMoments,
    estimate_moments,
    feature_matrix_to_tokens,
    tokens_to_feature_matrix,
    wkd_loss,
)


def _moments(mu, std):
    return GaussianMoments(Tensor(np.asarray(mu, float)), Tensor(np.asarray(std, float)))


# -- feature matrix -----------------------------------------------------------------
def test_feature_matrix_is_transpose():
    p = np.eye(4, 2)
    np.testing.assert_array_equal(tokens_to_feature_matrix(p, (2, 2)).data, p.T)


def test_feature_matrix_constant_columns():
    f = tokens_to_feature_matrix(np.full((6, 3), 2.5), (2, 3)).data
    assert np.all(f == f[:, :1])


def test_feature_matrix_round_trip():
    p = np.random.default_rng(0).random((2, 6, 3)).astype(np.float32)
    back = feature_matrix_to_tokens(tokens_to_feature_matrix(p, (1, 6))).data
    np.testing.assert_array_equal(back, p)


def test_feature_matrix_layout_error():
    with pytest.raises(DimensionError, match="3x3"):
        tokens_to_feature_matrix(np.zeros((8, 2)), (3, 3))


# -- moments ------------------------------------------------------------------------
def test_moments_single_column():
    m = estimate_moments(np.array([[1.0], [-2.0]]))
    np.testing.assert_allclose(m.mean.data, [1.0, -2.0])
    np.testing.assert_allclose(m.std.data, 0.0, atol=1e-5)


def test_moments_population_variance():
    m = estimate_moments(np.array([[1.0, 3.0]]))
    assert m.mean.data[0] == pytest.approx(2.0)
    assert m.std.data[0] == pytest.approx(1.0)


def test_moments_constant_matrix():
    m = estimate_moments(np.full((3, 5), 4.0))
    np.testing.assert_allclose(m.mean.data, 4.0)
    np.testing.assert_allclose(m.std.data, 0.0, atol=1e-5)


def test_moments_match_numpy():
    f = np.random.default_rng(1).normal(size=(2, 4, 7))
    with tn.precision(np.float64):
        m = estimate_moments(f)
    np.testing.assert_allclose(m.mean.data, f.mean(axis=-1), atol=1e-12)
    np.testing.assert_allclose(m.std.data, f.std(axis=-1), atol=1e-6)


# -- loss ---------------------------------------------------------------------------
def test_loss_identity_is_zero():
    a = _moments([1.0, 2.0], [0.5, 1.0])
    assert wkd_loss(a, a, 2.0).item() == 0.0


def test_loss_hand_value():
    t = _moments([1.0, 0.0], [1.0, 1.0])
    s = _moments([0.0, 0.0], [1.0, 1.0])
    assert wkd_loss(t, s, 2.0).item() == pytest.approx(2.0)


def test_loss_gamma_zero_is_std_term():
    t = _moments([3.0, -1.0], [1.0, 2.0])
    s = _moments([0.0, 0.0], [0.5, 1.0])
    assert wkd_loss(t, s, 0.0).item() == pytest.approx(0.25 + 1.0)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        wkd_loss(_moments([1.0], [1.0]), _moments([1.0, 2.0], [1.0, 1.0]), 1.0)


def test_loss_negative_gamma_rejected():
    with pytest.raises(ValueError):
        wkd_loss(_moments([1.0], [1.0]), _moments([1.0], [1.0]), -1.0)


# a 0.1 grid keeps squared gaps clear of float underflow
_vec = hnp.arrays(np.float64, 4, elements=st.integers(-50, 50).map(lambda v: v / 10))
_pos = hnp.arrays(np.float64, 4, elements=st.integers(0, 50).map(lambda v: v / 10))


@settings(max_examples=100, deadline=None)
@given(_vec, _pos, _vec, _pos, st.floats(0, 4))
def test_loss_nonnegative_symmetric_and_zero_iff_equal(mu_a, sd_a, mu_b, sd_b, gamma):
    with tn.precision(np.float64):
        ab = wkd_loss(_moments(mu_a, sd_a), _moments(mu_b, sd_b), gamma).item()
        ba = wkd_loss(_moments(mu_b, sd_b), _moments(mu_a, sd_a), gamma).item()
    assert ab >= 0
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-15)
    same = np.array_equal(sd_a, sd_b) and (gamma == 0 or np.array_equal(mu_a, mu_b))
    assert (ab == 0) == same


def test_loss_matches_gaussian_w2_oracle():
    rng = np.random.default_rng(11)
    for _ in range(25):
        mu_t, mu_s = rng.normal(size=4), rng.normal(size=4)
        sd_t, sd_s = rng.uniform(0.1, 2, 4), rng.uniform(0.1, 2, 4)
        with tn.precision(np.float64):
            value = wkd_loss(_moments(mu_t, sd_t), _moments(mu_s, sd_s), 1.0).item()
        assert abs(value - gaussian_w2_squared_oracle(mu_t, sd_t, mu_s, sd_s)) < 1e-5


def test_translation_changes_only_mean_term():
    rng = np.random.default_rng(4)
    teacher = rng.normal(size=(3, 6))  # (l, d)
    student = rng.normal(size=(3, 6))
    c = rng.normal(size=3)
    gamma = 1.7
    with tn.precision(np.float64):
        t = estimate_moments(teacher)
        base = wkd_loss(t, estimate_moments(student), gamma).item()
        moved = wkd_loss(t, estimate_moments(student + c[:, None]), gamma).item()
    gap = teacher.mean(axis=1) - student.mean(axis=1)
    expected = gamma * (np.sum((gap - c) ** 2) - np.sum(gap**2))
    assert moved - base == pytest.approx(expected, abs=1e-9)


def test_gradient_through_moments():
    rng = np.random.default_rng(0)
    teacher = rng.normal(size=(2, 3, 5))
    with tn.precision(np.float64):
        t = estimate_moments(teacher)

    def f(x):
        return wkd_loss(t, estimate_moments(x), 2.0)

    assert tn.finite_diff_check(f, rng.uniform(-2, 2, (2, 3, 5)), eps=1e-5) < 1e-4


def test_teacher_receives_no_gradient():
    teacher = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    student = Tensor(np.random.default_rng(1).normal(size=(3, 4)), requires_grad=True)
    tn.backward(wkd_loss(estimate_moments(teacher), estimate_moments(student), 2.0))
    assert teacher.grad is None and student.grad is not None
