import mpmath
import numpy as np
import pytest

from rem.importance import (
    DegenerateWeightsError,
    MomentProposal,
    compute_weights,
    fit_moment_proposal,
    sample_moment_proposal,
)
from rem.models import LinearGaussianModel, NotPositiveDefiniteError, standard_normal_log_pdf


def test_single_particle_gets_all_weight():
    ws = compute_weights([3.7], [-1.2])
    assert ws.normalized.tolist() == [1.0]
    assert ws.ess == 1.0


def test_uniform_log_weights():
    ws = compute_weights(np.zeros(4), np.zeros(4))
    np.testing.assert_array_equal(ws.normalized, [0.25] * 4)
    assert ws.ess == pytest.approx(4.0, abs=1e-12)


def test_huge_spread_matches_high_precision_oracle():
    log_w = [1000.0, 0.0]
    ws = compute_weights(log_w, [0.0, 0.0])
    mpmath.mp.dps = 600
    total = mpmath.exp(1000) + mpmath.exp(0)
    exact = [mpmath.exp(1000) / total, mpmath.exp(0) / total]
    assert exact[1] < mpmath.mpf("1e-434")
    assert ws.normalized[0] == float(exact[0]) == 1.0
    assert ws.normalized[1] == float(exact[1]) == 0.0
    assert np.all(np.isfinite(ws.normalized))


def test_moderate_spread_matches_high_precision_oracle(rng):
    mpmath.mp.dps = 50
    for _ in range(50):
        log_w = rng.normal(scale=300.0, size=6)
        ws = compute_weights(log_w, np.zeros(6))
        total = mpmath.fsum(mpmath.exp(mpmath.mpf(v)) for v in log_w)
        for k, v in enumerate(log_w):
            expected = float(mpmath.exp(mpmath.mpf(v)) / total)
            assert ws.normalized[k] == pytest.approx(expected, rel=1e-12, abs=1e-300)


def test_minus_inf_joint_allowed_for_some_particles():
    ws = compute_weights([-np.inf, 0.0, 0.0], [0.0, 0.0, 0.0])
    np.testing.assert_array_equal(ws.normalized, [0.0, 0.5, 0.5])


def test_all_minus_inf_rejected():
    with pytest.raises(DegenerateWeightsError):
        compute_weights([-np.inf, -np.inf], [0.0, 0.0])


def test_empty_rejected():
    with pytest.raises(DegenerateWeightsError):
        compute_weights([], [])


def test_degenerate_rows_masked_in_batch():
    lj = np.array([[0.0, 1.0], [-np.inf, -np.inf], [2.0, np.nan]])
    with pytest.raises(DegenerateWeightsError) as err:
        compute_weights(lj, np.zeros((3, 2)))
    assert err.value.rows == (1, 2)
    ws = compute_weights(lj, np.zeros((3, 2)), allow_degenerate=True)
    assert ws.degenerate.tolist() == [False, True, True]
    np.testing.assert_array_equal(ws.normalized[1:], 0.0)
    assert ws.normalized[0].sum() == pytest.approx(1.0)


def test_ess_extremes():
    K = 7
    assert compute_weights(np.zeros(K), np.zeros(K)).ess == pytest.approx(K)
    one_hot = np.full(K, -np.inf)
    one_hot[3] = 0.0
    assert compute_weights(one_hot, np.zeros(K)).ess == 1.0


def test_ess_decreases_with_concentration(rng):
    base = rng.normal(size=50)
    prev = np.inf
    for temp in [0.0, 0.5, 1.0, 2.0, 5.0, 20.0]:
        ess = compute_weights(temp * base, np.zeros(50)).ess
        assert ess <= prev + 1e-9
        prev = ess


def test_log_mean_weight_is_log_average(rng):
    log_w = rng.normal(size=(3, 9))
    ws = compute_weights(log_w, np.zeros_like(log_w))
    np.testing.assert_allclose(ws.log_mean_weight, np.log(np.exp(log_w).mean(axis=1)), rtol=1e-13)


# -- moment matching ---------------------------------------------------------


def test_identical_particles_give_epsilon_covariance():
    c = np.array([0.3, -1.2, 2.0])
    prop = fit_moment_proposal(np.tile(c, (5, 1)), np.full(5, 0.2), epsilon=1e-6)
    np.testing.assert_allclose(prop.mean, c, atol=1e-15)
    np.testing.assert_allclose(prop.cov, 1e-6 * np.eye(3), atol=1e-18)


def test_two_point_variance():
    prop = fit_moment_proposal(np.array([[1.0], [-1.0]]), np.array([0.5, 0.5]), epsilon=0.0)
    assert prop.mean[0] == 0.0
    assert prop.cov[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_weighted_moments_match_direct_computation(rng):
    for _ in range(20):
        K, L = 30, 4
        z = rng.normal(size=(K, L)) * rng.uniform(0.1, 3, size=L)
        log_w = rng.normal(size=K)
        ws = compute_weights(log_w, np.zeros(K))
        prop = fit_moment_proposal(z, ws, epsilon=1e-6)
        a = np.exp(log_w) / np.exp(log_w).sum()
        mean = sum(a[k] * z[k] for k in range(K))
        cov = sum(a[k] * np.outer(z[k] - mean, z[k] - mean) for k in range(K)) + 1e-6 * np.eye(L)
        np.testing.assert_allclose(prop.mean, mean, atol=1e-12)
        np.testing.assert_allclose(prop.cov, cov, atol=1e-12)
        chol = prop.chol
        assert np.allclose(chol, np.tril(chol)) and np.all(np.diag(chol) > 0)


def test_batched_fit_matches_per_item(rng):
    z = rng.normal(size=(3, 10, 2))
    ws = compute_weights(rng.normal(size=(3, 10)), np.zeros((3, 10)))
    batched = fit_moment_proposal(z, ws)
    for i in range(3):
        single = fit_moment_proposal(z[i], ws.normalized[i])
        np.testing.assert_allclose(batched.chol[i], single.chol, atol=1e-14)


def test_jitter_escalates_then_fails():
    # rank-1 cloud: with epsilon = 0 Cholesky fails at every escalation level
    z = np.array([[1.0, 1.0], [-1.0, -1.0], [2.0, 2.0]])
    with pytest.raises(NotPositiveDefiniteError):
        fit_moment_proposal(z, np.full(3, 1 / 3), epsilon=0.0)


def test_jitter_escalation_recovers(monkeypatch):
    z = np.array([[[1.0, 1.0], [-1.0, -1.0]]])
    w = np.array([[0.5, 0.5]])
    orig = np.linalg.cholesky
    calls = []

    def flaky(a):
        # batched attempt and first per-item attempt fail
        calls.append(1)
        if len(calls) <= 2:
            raise np.linalg.LinAlgError("forced")
        return orig(a)

    monkeypatch.setattr(np.linalg, "cholesky", flaky)
    prop = fit_moment_proposal(z, w, epsilon=1e-6)
    assert prop.epsilon[0] == pytest.approx(1e-5)


def test_fit_needs_two_particles():
    with pytest.raises(ValueError, match="K >= 2"):
        fit_moment_proposal(np.zeros((1, 2)), np.ones(1))


def test_standard_normal_sampling_mean(rng):
    prop = MomentProposal(np.zeros(3), np.eye(3), np.array(0.0))
    z, logp = sample_moment_proposal(prop, 100_000, rng)
    assert z.shape == (100_000, 3)
    assert np.all(np.abs(z.mean(axis=0)) < 0.02)
    np.testing.assert_allclose(logp, standard_normal_log_pdf(z).data, rtol=1e-12)


def test_sampling_is_reproducible():
    prop = MomentProposal(np.ones((2, 2)), np.tile(np.eye(2), (2, 1, 1)), np.zeros(2))
    a = sample_moment_proposal(prop, 5, np.random.default_rng(3))
    b = sample_moment_proposal(prop, 5, np.random.default_rng(3))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_sample_covariance_matches_target(rng):
    M = rng.normal(size=(3, 3))
    cov = M @ M.T + 0.3 * np.eye(3)
    prop = MomentProposal(rng.normal(size=3), np.linalg.cholesky(cov), np.array(0.0))
    z, _ = sample_moment_proposal(prop, 100_000, rng)
    err = np.abs(np.cov(z.T) - cov) / np.max(np.abs(cov))
    assert err.max() < 0.05


def test_oracle_bridge_prior_proposal_recovers_posterior():
    rng = np.random.default_rng(2019)
    model = LinearGaussianModel.random(5, 3, sigma2=1.0, rng=rng, scale=0.5)
    x, _ = model.sample(1, rng)
    post_mean, post_cov = model.posterior(x)
    z = rng.standard_normal((1, 100_000, 3))
    ws = compute_weights(model.log_joint(x, z).data, standard_normal_log_pdf(z).data)
    prop = fit_moment_proposal(z, ws)
    rel_mean = np.linalg.norm(prop.mean[0] - post_mean[0]) / np.linalg.norm(post_mean[0])
    assert rel_mean < 0.02
    assert np.max(np.abs(prop.cov[0] - post_cov)) / np.max(np.abs(post_cov)) < 0.05
