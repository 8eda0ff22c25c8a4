"""Gaussian feature moments and the Wasserstein distillation loss.

Token features (T x E) are viewed as a feature matrix with one column per
token. Each column set is summarised by its mean and per-channel standard
deviation (population normalisation, diagonal covariance), and teacher and
student summaries are compared with

    gamma * ||mu_t - mu_s||^2 + ||delta_t - delta_s||^2

which for diagonal Gaussians and gamma = 1 is the squared 2-Wasserstein
distance.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as tn
from .tensor import DimensionError, Tensor

VAR_EPS = 1e-12


@dataclass
class GaussianMoments:
    mean: Tensor  # (..., l)
    std: Tensor  # (..., l)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def tokens_to_feature_matrix(tokens, layout: tuple[int, int]) -> Tensor:
    """(..., T, E) tokens to the (..., E, T) channel-major feature matrix."""
    tokens = tn.as_tensor(tokens)
    h, w = layout
    if tokens.ndim < 2 or tokens.shape[-2] != h * w:
        raise DimensionError(f"tokens_to_feature_matrix: {tokens.shape} has no {h}x{w} token layout")
    return tn.transpose(tokens)


def feature_matrix_to_tokens(feature_matrix) -> Tensor:
    return tn.transpose(tn.as_tensor(feature_matrix))


def estimate_moments(feature_matrix) -> GaussianMoments:
    f = tn.as_tensor(feature_matrix)
    if f.ndim < 2 or f.shape[-1] < 1 or f.shape[-2] < 1:
        raise DimensionError(f"estimate_moments: expected (..., l, d) with l, d >= 1, got {f.shape}")
    mu = tn.mean(f, axis=-1, keepdims=True)
    var = tn.mean(tn.square(f - mu), axis=-1)
    std = tn.sqrt(var + VAR_EPS)
    return GaussianMoments(tn.reshape(mu, mu.shape[:-1]), std)


def wkd_loss(teacher: GaussianMoments, student: GaussianMoments, gamma: float) -> Tensor:
    """Batch-averaged distillation loss; gradients reach the student only."""
    if gamma < 0:
        raise ValueError(f"wkd_loss: gamma must be >= 0, got {gamma}")
    if teacher.mean.shape != student.mean.shape or teacher.std.shape != student.std.shape:
        raise DimensionError(
            f"wkd_loss: teacher moments {teacher.mean.shape} vs student moments {student.mean.shape}"
        )
    t_mu, t_std = teacher.mean.detach(), teacher.std.detach()
    mean_term = tn.sum(tn.square(t_mu - student.mean), axis=-1)
    cov_term = tn.sum(tn.square(t_std - student.std), axis=-1)
    return tn.mean(tn.scale(mean_term, gamma) + cov_term)
