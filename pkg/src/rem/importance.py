"""Self-normalized importance weights and moment-matched Gaussian proposals.

Weights are only ever formed in log space; nothing here exponentiates an
unnormalized log-weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .models import NotPositiveDefiniteError, full_gaussian_log_pdf

DEFAULT_EPSILON = 1e-6


class DegenerateWeightsError(ValueError):
    """No particle carries finite weight (or there are no particles)."""

    def __init__(self, message: str, rows=()):
        super().__init__(message)
        self.rows = tuple(int(r) for r in rows)


def log_normalize(log_w: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(log_w - lse(log_w), lse(log_w))`` along ``axis``."""
    m = np.max(log_w, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        lse = np.log(np.sum(np.exp(log_w - m), axis=axis, keepdims=True)) + m
        return log_w - lse, np.squeeze(lse, axis=axis)


@dataclass(frozen=True)
class WeightSet:
    """K log-weights per datapoint and their self-normalized form.

    Arrays carry an arbitrary leading batch shape: ``log_w`` and ``normalized``
    are (..., K); ``ess``, ``log_mean_weight`` and ``degenerate`` are (...).
    Degenerate rows have all-zero ``normalized`` and ``ess`` of 0.
    """

    log_w: np.ndarray
    normalized: np.ndarray
    ess: np.ndarray
    log_mean_weight: np.ndarray
    degenerate: np.ndarray

    @property
    def K(self) -> int:
        return self.log_w.shape[-1]


def compute_weights(log_joint, log_proposal, allow_degenerate: bool = False) -> WeightSet:
    """Self-normalize ``log_joint - log_proposal`` over the last (particle) axis.

    ``log_mean_weight`` is lse(log_w) - log K, the K-particle importance
    estimate of log p(x). A row whose log-weights are all -inf (or contain NaN
    or +inf) is degenerate: it raises unless ``allow_degenerate``.
    """
    log_joint = np.asarray(log_joint, dtype=np.float64)
    log_proposal = np.asarray(log_proposal, dtype=np.float64)
    if log_joint.shape != log_proposal.shape:
        raise ValueError(f"log-joint {log_joint.shape} and log-proposal {log_proposal.shape} differ in shape")
    if log_joint.ndim == 0 or log_joint.shape[-1] == 0:
        raise DegenerateWeightsError("no particles (K = 0)")
    with np.errstate(invalid="ignore"):
        log_w = log_joint - log_proposal
    bad = np.isnan(log_w) | np.isposinf(log_w)
    degenerate = np.any(bad, axis=-1) | np.all(np.isneginf(log_w), axis=-1)
    if np.any(degenerate) and not allow_degenerate:
        rows = np.flatnonzero(np.atleast_1d(degenerate))
        raise DegenerateWeightsError(f"degenerate importance weights in rows {rows.tolist()}", rows)
    safe = np.where(degenerate[..., None], 0.0, log_w)
    log_norm, lse = log_normalize(safe)
    normalized = np.where(degenerate[..., None], 0.0, np.exp(log_norm))
    with np.errstate(divide="ignore"):
        ess = np.where(degenerate, 0.0, 1.0 / np.sum(normalized * normalized, axis=-1))
    log_mean = np.where(degenerate, -np.inf, lse - math.log(log_w.shape[-1]))
    return WeightSet(log_w, normalized, ess, log_mean, degenerate)


@dataclass(frozen=True)
class MomentProposal:
    """Full-covariance Gaussian N(mean, chol @ chol.T), one per datapoint.

    ``mean`` is (..., L), ``chol`` is (..., L, L) lower triangular with a
    positive diagonal, ``epsilon`` is the diagonal jitter actually used (...).
    """

    mean: np.ndarray
    chol: np.ndarray
    epsilon: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ np.swapaxes(self.chol, -1, -2)

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        return full_gaussian_log_pdf(z, self.mean, self.chol)


def _normalized(weights) -> np.ndarray:
    if isinstance(weights, WeightSet):
        if np.any(weights.degenerate):
            raise DegenerateWeightsError("cannot fit a proposal to degenerate weights",
                                         np.flatnonzero(np.atleast_1d(weights.degenerate)))
        return weights.normalized
    return np.asarray(weights, dtype=np.float64)


def fit_moment_proposal(particles, weights, epsilon: float = DEFAULT_EPSILON) -> MomentProposal:
    """Weighted mean and covariance of the particles, plus ``epsilon * I``, Cholesky-factored.

    ``particles`` is (..., K, L); ``weights`` a WeightSet or normalized weights
    (..., K). Where the factorization fails the jitter is raised tenfold, at
    most three times, before giving up.
    """
    z = np.asarray(particles, dtype=np.float64)
    alpha = _normalized(weights)
    if z.shape[-2] < 2:
        raise ValueError(f"moment matching needs K >= 2 particles, got {z.shape[-2]}")
    if alpha.shape != z.shape[:-1]:
        raise ValueError(f"weights {alpha.shape} do not match particles {z.shape}")
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    L = z.shape[-1]
    mean = np.einsum("...k,...kl->...l", alpha, z)
    diff = z - mean[..., None, :]
    cov = np.einsum("...k,...ki,...kj->...ij", alpha, diff, diff)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    eye = np.eye(L)
    eps = np.full(cov.shape[:-2], float(epsilon))
    try:
        chol = np.linalg.cholesky(cov + epsilon * eye)
    except np.linalg.LinAlgError:
        chol = np.empty_like(cov)
        flat_cov, flat_chol, flat_eps = cov.reshape(-1, L, L), chol.reshape(-1, L, L), eps.reshape(-1)
        for i in range(flat_cov.shape[0]):
            for attempt in range(4):
                e = epsilon * 10.0**attempt
                try:
                    flat_chol[i] = np.linalg.cholesky(flat_cov[i] + e * eye)
                    flat_eps[i] = e
                    break
                except np.linalg.LinAlgError:
                    continue
            else:
                raise NotPositiveDefiniteError(
                    f"moment-matched covariance of item {i} is not PD even with jitter {epsilon * 1e3:g}"
                ) from None
    return MomentProposal(mean, chol, eps)


def sample_moment_proposal(proposal: MomentProposal, K: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Draw z = mean + chol @ xi with xi ~ N(0, I); returns particles (..., K, L) and their log-density (..., K)."""
    L = proposal.mean.shape[-1]
    xi = rng.standard_normal(proposal.mean.shape[:-1] + (K, L))
    z = proposal.mean[..., None, :] + xi @ np.swapaxes(proposal.chol, -1, -2)
    return z, proposal.log_prob(z)
