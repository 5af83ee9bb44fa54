"""Training objectives and their gradients.

Every objective is averaged over the datapoints of a minibatch. ``elbo``,
``iwae_eta_objective``, ``rem_theta_objective`` and ``rem_v2_theta_objective``
are maximized; ``rem_eta_objective`` is minimized.

The reweighted objectives are split in two stages. ``draw_from_encoder`` and
``draw_from_moment`` sample particles and fix their self-normalized weights at
the current parameters; the objective functions then differentiate a weighted
sum in which those weights are constants. Passing ``particles=`` reuses a
frozen draw, which is how the trainer evaluates both parameter updates at the
same iteration-start parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .importance import MomentProposal, WeightSet, compute_weights, sample_moment_proposal


@dataclass
class ObjectiveValue:
    """Minibatch objective: mean ``value``, ``per_point`` values (NaN where skipped) and gradients."""

    value: float
    per_point: np.ndarray
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0
    ess: np.ndarray | None = None


@dataclass
class ParticleSet:
    """K particles per datapoint with weights frozen at the parameters that drew them."""

    z: np.ndarray
    log_joint: np.ndarray
    log_proposal: np.ndarray
    weights: WeightSet
    # differentiable log p(x, z) kept from the draw so a theta step can skip a forward pass
    log_joint_tensor: ad.Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.z.shape[-2]

    def mask_rows(self, rows: np.ndarray) -> ParticleSet:
        """Copy with the given datapoints marked degenerate (skipped by every objective)."""
        rows = np.asarray(rows, dtype=bool)
        ws = self.weights
        weights = replace(
            ws,
            normalized=np.where(rows[..., None], 0.0, ws.normalized),
            ess=np.where(rows, 0.0, ws.ess),
            log_mean_weight=np.where(rows, -np.inf, ws.log_mean_weight),
            degenerate=ws.degenerate | rows,
        )
        return replace(self, weights=weights)


def _reduce(per_point: ad.Tensor, valid: np.ndarray, params: dict[str, ad.Tensor], what: str):
    """Average the valid per-point values, backpropagate, and collect gradients for ``params``."""
    values = per_point.data
    bad = valid & ~np.isfinite(values)
    if np.any(bad):
        raise FloatingPointError(f"{what}: non-finite estimate at datapoint {int(np.flatnonzero(bad)[0])}")
    n_valid = int(valid.sum())
    for t in params.values():
        t.grad = None
    if n_valid == 0:
        grads = {k: np.zeros_like(t.data) for k, t in params.items()}
        return float("nan"), np.full(values.shape, np.nan), grads
    total = ad.weighted_sum(per_point, valid.astype(np.float64), axis=0) * (1.0 / n_valid)
    if total.requires_grad:
        # under ad.no_grad only the value is wanted; gradients come back as zeros
        ad.backward(total)
    grads = {}
    for k, t in params.items():
        grads[k] = np.zeros_like(t.data) if t.grad is None else t.grad
        t.grad = None
    return float(total.data), np.where(valid, values, np.nan), grads


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


# ---------------------------------------------------------------------------
# reparameterized objectives (VAE and IWAE)


def elbo(model, encoder, x, rng, K: int = 1) -> ObjectiveValue:
    """K-sample mean of log p(x, z) - log r(z | x) with reparameterized z; gradients for both networks."""
    x = _as_batch(x)
    z, moments = encoder.sample(x, K, rng)
    log_w = model.log_joint(x, z) - encoder.log_prob(x, z, moments)
    per_point = ad.mean(log_w, axis=-1)
    valid = np.ones(x.shape[0], dtype=bool)
    value, pp, grads = _reduce(per_point, valid, {**model.parameters(), **encoder.parameters()}, "elbo")
    return ObjectiveValue(value, pp, grads, ess=np.ones(x.shape[0]))


def iwae_eta_objective(model, encoder, x, K: int, rng) -> ObjectiveValue:
    """log of the average of K importance weights, lse(log w) - log K; gradients for both networks.

    Gradients reach the encoder through reparameterized particles. The same
    scalar is the K-particle log-likelihood estimate used in evaluation.
    """
    x = _as_batch(x)
    z, moments = encoder.sample(x, K, rng)
    log_w = model.log_joint(x, z) - encoder.log_prob(x, z, moments)
    per_point = ad.logsumexp(log_w, axis=-1) - math.log(K)
    valid = np.ones(x.shape[0], dtype=bool)
    ws = compute_weights(log_w.data, np.zeros_like(log_w.data), allow_degenerate=True)
    value, pp, grads = _reduce(per_point, valid, {**model.parameters(), **encoder.parameters()}, "iwae")
    return ObjectiveValue(value, pp, grads, ess=ws.ess)


# ---------------------------------------------------------------------------
# reweighted objectives


def _log_joint(model, x, z, keep_graph: bool):
    if keep_graph:
        t = model.log_joint(x, z)
        return t.data, t
    with ad.no_grad():
        return model.log_joint(x, z).data, None


def draw_from_encoder(model, encoder, x, K: int, rng, keep_graph: bool = False) -> ParticleSet:
    """Particles from r(z | x) with weights p(x, z) / r(z | x).

    Weights are plain arrays. With ``keep_graph`` the differentiable
    log-joint is retained so a later theta objective can reuse it.
    """
    x = _as_batch(x)
    with ad.no_grad():
        z, moments = encoder.sample(x, K, rng)
        z = z.data
        log_r = encoder.log_prob(x, z, moments).data
    log_p, graph = _log_joint(model, x, z, keep_graph)
    return ParticleSet(z, log_p, log_r, compute_weights(log_p, log_r, allow_degenerate=True), graph)


def draw_from_moment(model, proposals: MomentProposal, x, K: int, rng, keep_graph: bool = False) -> ParticleSet:
    """Fresh particles from the moment-matched proposals with weights p(x, z) / s(z)."""
    x = _as_batch(x)
    z, log_s = sample_moment_proposal(proposals, K, rng)
    log_p, graph = _log_joint(model, x, z, keep_graph)
    return ParticleSet(z, log_p, log_s, compute_weights(log_p, log_s, allow_degenerate=True), graph)


def _weighted_log_joint(model, x, particles: ParticleSet, what: str) -> ObjectiveValue:
    ws = particles.weights
    log_p = particles.log_joint_tensor
    if log_p is None or not log_p.requires_grad:
        # no retained graph, or it was consumed by an earlier backward
        log_p = model.log_joint(x, particles.z)
    per_point = ad.weighted_sum(log_p, ws.normalized, axis=-1)
    valid = ~ws.degenerate
    value, pp, grads = _reduce(per_point, valid, model.parameters(), what)
    return ObjectiveValue(value, pp, grads, skipped=int((~valid).sum()), ess=ws.ess)


def rem_theta_objective(model, encoder, x, K: int, rng, particles: ParticleSet | None = None) -> ObjectiveValue:
    """sum_k alpha_k log p_theta(x, z_k) with z_k ~ r(z | x) and alpha held constant; theta gradients only."""
    x = _as_batch(x)
    if particles is None:
        particles = draw_from_encoder(model, encoder, x, K, rng)
    return _weighted_log_joint(model, x, particles, "rem-theta")


def rem_v2_theta_objective(model, proposals: MomentProposal, x, K: int, rng,
                           particles: ParticleSet | None = None) -> ObjectiveValue:
    """As :func:`rem_theta_objective` but with particles and weights from the moment-matched proposal."""
    x = _as_batch(x)
    if particles is None:
        particles = draw_from_moment(model, proposals, x, K, rng)
    return _weighted_log_joint(model, x, particles, "rem-v2-theta")


def rem_eta_objective(model, encoder, proposals: MomentProposal, x, K: int, rng,
                      particles: ParticleSet | None = None) -> ObjectiveValue:
    """-sum_k beta_k log r_eta(z_k | x) with z_k ~ s(z); to be minimized; eta gradients only.

    With beta the self-normalized p(x, z) / s(z) this estimates the inclusive
    KL from the model posterior to the encoder, up to a constant in eta.
    """
    x = _as_batch(x)
    if particles is None:
        particles = draw_from_moment(model, proposals, x, K, rng)
    ws = particles.weights
    log_r = encoder.log_prob(x, particles.z)
    per_point = -ad.weighted_sum(log_r, ws.normalized, axis=-1)
    valid = ~ws.degenerate
    value, pp, grads = _reduce(per_point, valid, encoder.parameters(), "rem-eta")
    return ObjectiveValue(value, pp, grads, skipped=int((~valid).sum()), ess=ws.ess)


# ---------------------------------------------------------------------------
# diagnostics


def kl_to_prior_per_point(encoder, x) -> np.ndarray:
    """KL(N(mean, diag var) || N(0, I)) = 1/2 sum(mean^2 + var - log var - 1), per datapoint."""
    mean, logvar = (t.data for t in encoder.params_of(_as_batch(x)))
    return 0.5 * np.sum(mean * mean + np.exp(logvar) - logvar - 1.0, axis=-1)


def kl_proposal_to_prior(encoder, x) -> float:
    """Closed-form KL from the encoder's proposal to the prior, averaged over ``x``."""
    return float(np.mean(kl_to_prior_per_point(encoder, x)))
