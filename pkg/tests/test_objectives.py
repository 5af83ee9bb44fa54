import math

import numpy as np
import pytest

from rem import autodiff as ad
from rem.autodiff import Tensor
from rem.importance import MomentProposal, compute_weights, fit_moment_proposal
from rem.models import (
    Decoder,
    DiagonalGaussianProposal,
    Encoder,
    ExactPosteriorEncoder,
    LinearGaussianModel,
    encoder_params,
)
from rem.objectives import (
    ParticleSet,
    draw_from_encoder,
    draw_from_moment,
    elbo,
    iwae_eta_objective,
    kl_proposal_to_prior,
    kl_to_prior_per_point,
    rem_eta_objective,
    rem_theta_objective,
    rem_v2_theta_objective,
)

from conftest import central_difference, rel_error, tiny_nets


def _orthogonal_model(rng, D=5, L=2, sigma2=0.4):
    q, _ = np.linalg.qr(rng.normal(size=(D, L)))
    return LinearGaussianModel(q * np.linspace(2.0, 0.8, L), sigma2)


def _posterior_proposal(model, x):
    mean, cov = model.posterior(x)
    chol = np.broadcast_to(np.linalg.cholesky(cov), (x.shape[0],) + cov.shape).copy()
    return MomentProposal(mean, chol, np.zeros(x.shape[0]))


class FreeDiagonal(DiagonalGaussianProposal):
    """Per-datapoint mean and log-variance as free parameters (ignores x)."""

    prefix = "free"

    def __init__(self, B, L):
        self.params = {
            "mean": Tensor(np.zeros((B, L)), requires_grad=True),
            "logvar": Tensor(np.zeros((B, L)), requires_grad=True),
        }

    def params_of(self, x):
        return self.params["mean"], self.params["logvar"]


# -- ELBO ---------------------------------------------------------------------


def test_elbo_collapsed_case_is_uniform_bernoulli(rng):
    D = 7
    dec = Decoder(latent_dim=3, data_dim=D, hidden=4, zeros=True)
    enc = Encoder(data_dim=D, latent_dim=3, hidden=4, zeros=True)
    x = rng.integers(0, 2, size=(4, D)).astype(float)
    # with r = prior the sampled log p(z) - log r(z) cancels exactly
    out = elbo(dec, enc, x, rng)
    np.testing.assert_allclose(out.per_point, D * math.log(0.5), atol=1e-12)


def test_elbo_below_analytic_marginal(rng):
    model = LinearGaussianModel.random(4, 2, 0.5, rng)
    enc = Encoder(data_dim=4, latent_dim=2, hidden=5, rng=rng)
    x, _ = model.sample(3, rng)
    vals = np.array([elbo(model, enc, x, np.random.default_rng(s), K=10).per_point for s in range(200)])
    se = vals.std(axis=0) / math.sqrt(len(vals))
    assert np.all(vals.mean(axis=0) <= model.log_marginal(x) + 2 * se)


def test_elbo_with_exact_posterior_equals_marginal(rng):
    model = _orthogonal_model(rng)
    x, _ = model.sample(5, rng)
    out = elbo(model, ExactPosteriorEncoder(model), x, rng, K=3)
    np.testing.assert_allclose(out.per_point, model.log_marginal(x), rtol=1e-12)


def test_elbo_gradient_matches_finite_differences():
    dec, enc, x = tiny_nets(0)
    out = elbo(dec, enc, x, np.random.default_rng(1), K=2)
    params = {**dec.parameters(), **enc.parameters()}
    numeric = central_difference(
        lambda: elbo(dec, enc, x, np.random.default_rng(1), K=2).value, [t.data for t in params.values()]
    )
    assert rel_error([out.grads[k] for k in params], numeric) < 1e-4


def test_elbo_names_the_bad_datapoint():
    class Broken(LinearGaussianModel):
        def log_joint(self, x, z):
            out = super().log_joint(x, z)
            bad = np.zeros(out.shape)
            bad[1] = np.nan
            return out + bad

    rng = np.random.default_rng(0)
    model = Broken(rng.normal(size=(3, 2)), 1.0)
    enc = Encoder(data_dim=3, latent_dim=2, hidden=4, rng=rng)
    with pytest.raises(FloatingPointError, match="datapoint 1"):
        elbo(model, enc, rng.normal(size=(3, 3)), rng)


# -- IWAE ---------------------------------------------------------------------


def test_iwae_k1_equals_elbo_exactly():
    dec, enc, x = tiny_nets(3)
    a = iwae_eta_objective(dec, enc, x, 1, np.random.default_rng(5))
    b = elbo(dec, enc, x, np.random.default_rng(5), K=1)
    assert np.array_equal(a.per_point, b.per_point)
    for k in a.grads:
        np.testing.assert_allclose(a.grads[k], b.grads[k], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("K", [1, 7, 100])
def test_iwae_exact_posterior_equals_log_marginal(K):
    rng = np.random.default_rng(K)
    model = _orthogonal_model(rng)
    x, _ = model.sample(4, rng)
    out = iwae_eta_objective(model, ExactPosteriorEncoder(model), x, K, rng)
    np.testing.assert_allclose(out.per_point, model.log_marginal(x), rtol=1e-12)
    np.testing.assert_allclose(out.ess, K, rtol=1e-9)


def test_iwae_below_analytic_marginal_in_expectation(rng):
    model = LinearGaussianModel.random(4, 2, 0.5, rng)
    enc = Encoder(data_dim=4, latent_dim=2, hidden=5, rng=rng)
    x, _ = model.sample(2, rng)
    vals = np.array([iwae_eta_objective(model, enc, x, 20, np.random.default_rng(s)).per_point
                     for s in range(300)])
    se = vals.std(axis=0) / math.sqrt(len(vals))
    assert np.all(vals.mean(axis=0) <= model.log_marginal(x) + 2 * se)


def test_iwae_gradient_matches_finite_differences():
    dec, enc, x = tiny_nets(4)
    out = iwae_eta_objective(dec, enc, x, 5, np.random.default_rng(2))
    params = {**dec.parameters(), **enc.parameters()}
    numeric = central_difference(
        lambda: iwae_eta_objective(dec, enc, x, 5, np.random.default_rng(2)).value,
        [t.data for t in params.values()],
    )
    assert rel_error([out.grads[k] for k in params], numeric) < 1e-4


# -- REM theta ----------------------------------------------------------------


def test_rem_theta_k1_is_log_joint():
    dec, enc, x = tiny_nets(6)
    ps = draw_from_encoder(dec, enc, x, 1, np.random.default_rng(0))
    out = rem_theta_objective(dec, enc, x, 1, None, particles=ps)
    np.testing.assert_array_equal(ps.weights.normalized, 1.0)
    np.testing.assert_allclose(out.per_point, ps.log_joint[:, 0], rtol=1e-14)


def test_rem_theta_gradient_with_frozen_particles():
    dec, enc, x = tiny_nets(7)
    ps = draw_from_encoder(dec, enc, x, 6, np.random.default_rng(0))
    out = rem_theta_objective(dec, enc, x, 6, None, particles=ps)
    assert set(out.grads) == set(dec.parameters())
    numeric = central_difference(
        lambda: rem_theta_objective(dec, enc, x, 6, None, particles=ps).value,
        [t.data for t in dec.parameters().values()],
    )
    assert rel_error(list(out.grads.values()), numeric) < 1e-4


def test_rem_theta_theta_gradient_ignores_eta_with_frozen_particles():
    dec, enc, x = tiny_nets(8)
    ps = draw_from_encoder(dec, enc, x, 4, np.random.default_rng(0))
    before = rem_theta_objective(dec, enc, x, 4, None, particles=ps).grads
    for t in enc.params.values():
        t.data += 0.3
    after = rem_theta_objective(dec, enc, x, 4, None, particles=ps).grads
    for k in before:
        assert np.array_equal(before[k], after[k])
    assert all(t.grad is None for t in enc.params.values())


def test_rem_theta_matches_exact_m_step_gradient():
    rng = np.random.default_rng(2019)
    model = _orthogonal_model(rng, D=4, L=2, sigma2=0.5)
    x, _ = model.sample(3, rng)
    enc = ExactPosteriorEncoder(model)
    K = 40_000
    out = rem_theta_objective(model, enc, x, K, rng)
    # exact posterior proposal: all weights equal 1/K
    np.testing.assert_allclose(out.ess, K, rtol=1e-9)

    A, s2 = model.A, model.sigma2
    mean, cov = model.posterior(x)
    N, D = x.shape
    Ezz = N * cov + mean.T @ mean
    gA = (x.T @ mean - A @ Ezz) / s2 / N
    resid = np.sum(x * x) - 2 * np.sum((mean @ A.T) * x) + np.trace(Ezz @ A.T @ A)
    g_ls2 = (0.5 * resid / s2 - 0.5 * N * D) / N
    # MC tolerance: a few standard errors at K = 4e4 per datapoint
    assert rel_error(out.grads["model.A"], gA) < 0.02
    assert out.grads["model.log_sigma2"] == pytest.approx(g_ls2, abs=0.05 * max(1.0, abs(g_ls2)))


def test_degenerate_rows_are_skipped(rng):
    dec, enc, x = tiny_nets(9)
    ps = draw_from_encoder(dec, enc, x, 3, rng)
    lj = ps.log_joint.copy()
    lj[1] = -np.inf
    broken = ParticleSet(ps.z, lj, ps.log_proposal, compute_weights(lj, ps.log_proposal, allow_degenerate=True))
    out = rem_theta_objective(dec, enc, x, 3, None, particles=broken)
    assert out.skipped == 1
    assert np.isnan(out.per_point[1])
    assert out.value == pytest.approx(np.mean(out.per_point[[0, 2]]), rel=1e-14)


# -- REM eta and v2 -----------------------------------------------------------


def test_rem_eta_k1_is_negative_log_proposal():
    dec, enc, x = tiny_nets(10)
    ps = draw_from_encoder(dec, enc, x, 4, np.random.default_rng(0))
    prop = fit_moment_proposal(ps.z, ps.weights)
    fresh = draw_from_moment(dec, prop, x, 1, np.random.default_rng(1))
    out = rem_eta_objective(dec, enc, prop, x, 1, None, particles=fresh)
    expected = -enc.log_prob(x, fresh.z).data[:, 0]
    np.testing.assert_allclose(out.per_point, expected, rtol=1e-14)


def test_rem_eta_gradient_matches_finite_differences():
    dec, enc, x = tiny_nets(11)
    ps = draw_from_encoder(dec, enc, x, 5, np.random.default_rng(0))
    prop = fit_moment_proposal(ps.z, ps.weights)
    fresh = draw_from_moment(dec, prop, x, 5, np.random.default_rng(1))
    out = rem_eta_objective(dec, enc, prop, x, 5, None, particles=fresh)
    assert set(out.grads) == set(enc.parameters())
    numeric = central_difference(
        lambda: rem_eta_objective(dec, enc, prop, x, 5, None, particles=fresh).value,
        [t.data for t in enc.parameters().values()],
    )
    assert rel_error(list(out.grads.values()), numeric) < 1e-4


def test_rem_eta_minimizer_recovers_posterior_moments():
    rng = np.random.default_rng(2019)
    model = LinearGaussianModel.random(5, 2, 0.6, rng, scale=0.8)
    x, _ = model.sample(2, rng)
    s = _posterior_proposal(model, x)
    K = 20_000
    ps = draw_from_moment(model, s, x, K, rng)
    np.testing.assert_allclose(ps.weights.normalized, 1.0 / K, rtol=1e-8)

    free = FreeDiagonal(2, 2)
    for _ in range(3000):
        g = rem_eta_objective(model, free, s, x, K, None, particles=ps).grads
        for k, t in free.parameters().items():
            t.data -= 0.5 * g[k]
    mean, cov = model.posterior(x)
    got_mean = free.params["mean"].data
    got_var = np.exp(free.params["logvar"].data)
    # stationary point is the weighted particle mean and marginal variances
    a = ps.weights.normalized[..., None]
    wm = np.sum(a * ps.z, axis=1)
    wv = np.sum(a * (ps.z - wm[:, None]) ** 2, axis=1)
    np.testing.assert_allclose(got_mean, wm, atol=1e-8)
    np.testing.assert_allclose(got_var, wv, rtol=1e-6)
    np.testing.assert_allclose(got_mean, mean, atol=0.03)
    np.testing.assert_allclose(got_var, np.broadcast_to(np.diag(cov), got_var.shape), rtol=0.03)


def test_rem_v2_k1_is_log_joint():
    dec, enc, x = tiny_nets(12)
    ps = draw_from_encoder(dec, enc, x, 3, np.random.default_rng(0))
    prop = fit_moment_proposal(ps.z, ps.weights)
    fresh = draw_from_moment(dec, prop, x, 1, np.random.default_rng(1))
    out = rem_v2_theta_objective(dec, prop, x, 1, None, particles=fresh)
    np.testing.assert_allclose(out.per_point, fresh.log_joint[:, 0], rtol=1e-14)


def test_rem_v2_gradient_matches_finite_differences():
    dec, enc, x = tiny_nets(13)
    ps = draw_from_encoder(dec, enc, x, 5, np.random.default_rng(0))
    prop = fit_moment_proposal(ps.z, ps.weights)
    fresh = draw_from_moment(dec, prop, x, 5, np.random.default_rng(1))
    out = rem_v2_theta_objective(dec, prop, x, 5, None, particles=fresh)
    numeric = central_difference(
        lambda: rem_v2_theta_objective(dec, prop, x, 5, None, particles=fresh).value,
        [t.data for t in dec.parameters().values()],
    )
    assert rel_error(list(out.grads.values()), numeric) < 1e-4


def test_rem_v2_with_s_equal_to_r_matches_rem_theta():
    dec, enc, x = tiny_nets(14)
    mean, logvar = encoder_params(enc, x)
    chol = np.stack([np.diag(np.exp(0.5 * lv)) for lv in logvar])
    s = MomentProposal(mean, chol, np.zeros(len(x)))
    a = rem_theta_objective(dec, enc, x, 8, np.random.default_rng(3))
    b = rem_v2_theta_objective(dec, s, x, 8, np.random.default_rng(3))
    np.testing.assert_allclose(a.per_point, b.per_point, rtol=1e-12)
    for k in a.grads:
        np.testing.assert_allclose(a.grads[k], b.grads[k], rtol=1e-10, atol=1e-14)


def test_objectives_are_deterministic_under_seed():
    dec, enc, x = tiny_nets(15)
    ps = draw_from_encoder(dec, enc, x, 4, np.random.default_rng(0))
    prop = fit_moment_proposal(ps.z, ps.weights)
    calls = [
        lambda r: elbo(dec, enc, x, r),
        lambda r: iwae_eta_objective(dec, enc, x, 4, r),
        lambda r: rem_theta_objective(dec, enc, x, 4, r),
        lambda r: rem_eta_objective(dec, enc, prop, x, 4, r),
        lambda r: rem_v2_theta_objective(dec, prop, x, 4, r),
    ]
    for f in calls:
        a, b = f(np.random.default_rng(42)), f(np.random.default_rng(42))
        assert np.array_equal(a.per_point, b.per_point)
        assert all(np.array_equal(a.grads[k], b.grads[k]) for k in a.grads)


def test_maximized_objectives_average_over_batch():
    dec, enc, x = tiny_nets(16, n=4)
    out = iwae_eta_objective(dec, enc, x, 3, np.random.default_rng(0))
    assert out.value == pytest.approx(out.per_point.mean(), rel=1e-14)


# -- KL to prior --------------------------------------------------------------


def test_kl_closed_form_cases():
    enc = Encoder(data_dim=3, latent_dim=1, hidden=2, zeros=True)
    assert kl_proposal_to_prior(enc, np.ones((2, 3))) == 0.0
    enc.params["bmu"].data[:] = 1.0
    assert kl_proposal_to_prior(enc, np.ones((2, 3))) == pytest.approx(0.5, abs=1e-15)


def test_kl_matches_monte_carlo(rng):
    enc = Encoder(data_dim=4, latent_dim=3, hidden=5, rng=rng)
    enc.params["bmu"].data[:] = [0.8, -0.5, 1.2]
    enc.params["blv"].data[:] = [-0.7, 0.4, -1.5]
    x = rng.integers(0, 2, size=(3, 4)).astype(float)
    exact = kl_to_prior_per_point(enc, x)
    z, moments = enc.sample(x, 400_000, rng)
    log_r = enc.log_prob(x, z, moments).data
    log_p = -0.5 * np.sum(z.data**2, axis=-1) - 1.5 * math.log(2 * math.pi)
    mc = (log_r - log_p).mean(axis=1)
    np.testing.assert_allclose(mc, exact, rtol=0.01)


def test_retained_graph_gives_same_gradient_and_is_single_use():
    dec, enc, x = tiny_nets(17)
    kept = draw_from_encoder(dec, enc, x, 5, np.random.default_rng(0), keep_graph=True)
    plain = draw_from_encoder(dec, enc, x, 5, np.random.default_rng(0))
    assert np.array_equal(kept.z, plain.z) and np.array_equal(kept.log_joint, plain.log_joint)
    a = rem_theta_objective(dec, enc, x, 5, None, particles=kept)
    b = rem_theta_objective(dec, enc, x, 5, None, particles=plain)
    again = rem_theta_objective(dec, enc, x, 5, None, particles=kept)
    for k in a.grads:
        np.testing.assert_allclose(a.grads[k], b.grads[k], rtol=1e-13, atol=1e-15)
        np.testing.assert_allclose(again.grads[k], b.grads[k], rtol=1e-13, atol=1e-15)


def test_mask_rows_marks_degenerate():
    dec, enc, x = tiny_nets(18)
    ps = draw_from_encoder(dec, enc, x, 3, np.random.default_rng(0)).mask_rows(np.array([False, True, False]))
    out = rem_theta_objective(dec, enc, x, 3, None, particles=ps)
    assert out.skipped == 1 and ps.weights.ess[1] == 0.0


def test_no_grad_gives_same_value_without_gradients():
    dec, enc, x = tiny_nets(19)
    a = iwae_eta_objective(dec, enc, x, 4, np.random.default_rng(0))
    with ad.no_grad():
        b = iwae_eta_objective(dec, enc, x, 4, np.random.default_rng(0))
    assert a.value == b.value
    assert all(not g.any() for g in b.grads.values())
