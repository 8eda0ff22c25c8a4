"""Batch knowledge ensemble over replayed teacher tokens.

Teacher tokens (replayed) and student tokens (live encoder) are compared by
cosine similarity per batch element, the self-affinity diagonal is dropped,
rows are softmax-normalised, and teacher features are propagated along the
resulting row-stochastic matrix. The fixed point of the propagation,

    Q = (1 - w) (I - w A)^-1 P_teacher,

is the distillation target. The whole teacher path is computed outside the
gradient graph; only the student side of :func:`loss_fd` is differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor
from .wkd import estimate_moments, tokens_to_feature_matrix, wkd_loss


class AffinityError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class TokenBatch:
    """B x T x E token features tagged with where they came from."""

    data: np.ndarray
    role: str  # "teacher" (replayed) or "student" (live encoder)

    def __post_init__(self):
        if self.role not in ("teacher", "student"):
            raise ValueError(f"TokenBatch role must be 'teacher' or 'student', got {self.role!r}")
        if np.ndim(self.data) != 3:
            raise DimensionError(f"TokenBatch expects (B, T, E), got {np.shape(self.data)}")


def _array(x) -> np.ndarray:
    if isinstance(x, (Tensor, TokenBatch)):
        return x.data
    return np.asarray(x)


def _unit_tokens(p: np.ndarray, role: str) -> np.ndarray:
    norms = np.linalg.norm(p, axis=-1, keepdims=True)
    zero = np.argwhere(norms[..., 0] == 0)
    if zero.size:
        b, t = (int(v) for v in zero[0])
        raise AffinityError(f"similarity_matrix: {role} token {t} of batch element {b} has zero norm")
    return p / norms


def similarity_matrix(teacher, student) -> np.ndarray:
    """Cosine affinities A[b, i, j] between teacher token i and student token j."""
    t, s = _array(teacher), _array(student)
    if t.ndim != 3 or t.shape != s.shape:
        raise DimensionError(f"similarity_matrix: teacher {t.shape} and student {s.shape} must both be (B, T, E)")
    return _unit_tokens(t, "teacher") @ np.swapaxes(_unit_tokens(s, "student"), -1, -2)


def normalize_affinity(raw) -> np.ndarray:
    """Zero the diagonal, then softmax every row over its off-diagonal entries."""
    a = _array(raw)
    if a.ndim != 3 or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"normalize_affinity: expected (B, T, T), got {a.shape}")
    size = a.shape[-1]
    if size < 2:
        raise AffinityError(f"normalize_affinity: T={size}; at least two tokens are needed once the diagonal is dropped")
    off_diag = ~np.eye(size, dtype=bool)
    return tn.softmax(Tensor(a * off_diag, dtype=a.dtype), mask=off_diag).data


def _check_omega(omega: float, allow_boundary: bool) -> None:
    lo_ok = omega > 0 or (allow_boundary and omega == 0)
    hi_ok = omega < 1 or (allow_boundary and omega == 1)
    if not (lo_ok and hi_ok):
        raise ConfigError(f"omega must lie in (0, 1), got {omega}")


def propagate_iterative(a_hat, teacher, omega: float, steps: int, allow_boundary: bool = False) -> np.ndarray:
    """Repeat Q <- w A Q + (1 - w) P starting from Q = P, ``steps`` times."""
    _check_omega(omega, allow_boundary)
    if steps < 1:
        raise ConfigError(f"propagate_iterative: steps must be >= 1, got {steps}")
    a, p = _array(a_hat), _array(teacher)
    q = p
    for _ in range(steps):
        q = omega * (a @ q) + (1.0 - omega) * p
    return q


def ensemble_closed_form(a_hat, teacher, omega: float) -> np.ndarray:
    _check_omega(omega, allow_boundary=False)
    a, p = _array(a_hat), _array(teacher)
    if a.shape[:-1] != p.shape[:-1] or a.shape[-1] != a.shape[-2]:
        raise DimensionError(f"ensemble_closed_form: affinity {a.shape} incompatible with teacher {p.shape}")
    system = np.eye(a.shape[-1]) - omega * a
    inv = tn.inverse(Tensor(system, dtype=np.float64)).data
    return ((1.0 - omega) * (inv @ p.astype(np.float64))).astype(p.dtype)


def bke_target(teacher, student, omega: float) -> np.ndarray:
    """Distillation target Q for a replayed teacher batch and the live student batch.

    Affinities use the student's current values but never its graph.
    """
    t = _array(teacher).astype(np.float64)
    s = _array(student).astype(np.float64)
    a_hat = normalize_affinity(similarity_matrix(t, s))
    return ensemble_closed_form(a_hat, t, omega)


def loss_fd(target, student, gamma: float, layout: tuple[int, int] | None = None) -> Tensor:
    """Wasserstein distillation of the student tokens towards a constant target.

    Both are (B, T, E); moments are taken per batch element over tokens and the
    loss is averaged over the batch.
    """
    student = tn.as_tensor(student)
    target = np.asarray(_array(target), dtype=student.dtype)
    if target.shape != student.shape:
        raise DimensionError(f"loss_fd: target {target.shape} and student {student.shape} differ")
    if layout is None:
        layout = (1, student.shape[-2])
    teacher_moments = estimate_moments(tokens_to_feature_matrix(Tensor(target, dtype=target.dtype), layout))
    student_moments = estimate_moments(tokens_to_feature_matrix(student, layout))
    return wkd_loss(teacher_moments, student_moments, gamma)
