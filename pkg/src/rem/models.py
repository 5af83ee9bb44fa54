"""Generative models, recognition networks and Gaussian log-densities.

Shapes follow one convention throughout: data ``x`` is (B, D); latents are
(B, K, L) with K particles per datapoint; log-densities come back as (B, K).
A 2-D latent (B, L) is accepted wherever (B, K, L) is, giving (B,) back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)


class NonFiniteError(FloatingPointError):
    """A network produced NaN or infinite activations."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization failed on a supposedly positive-definite matrix."""


# ---------------------------------------------------------------------------
# Gaussian log-densities


def diag_gaussian_log_pdf(z, mean, logvar) -> Tensor:
    """log N(z; mean, diag(exp(logvar))), summed over the last axis. Differentiable."""
    z, mean, logvar = ad.as_tensor(z), ad.as_tensor(mean), ad.as_tensor(logvar)
    L = z.shape[-1]
    quad = ad.sum(ad.square(z - mean) * ad.exp(-logvar) + logvar, axis=-1)
    return -0.5 * quad - 0.5 * L * LOG_2PI


def standard_normal_log_pdf(z) -> Tensor:
    z = ad.as_tensor(z)
    return -0.5 * ad.sum(ad.square(z), axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def cholesky(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a (batch of) symmetric positive-definite matrices."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"covariance is not positive definite: {exc}") from None


def full_gaussian_log_pdf(z: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(z; mean, chol @ chol.T) for z of shape (..., K, L), mean (..., L), chol (..., L, L)."""
    z = np.asarray(z, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    chol = np.asarray(chol, dtype=np.float64)
    L = z.shape[-1]
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    if np.any(diag <= 0) or not np.all(np.isfinite(diag)):
        raise NotPositiveDefiniteError("Cholesky factor has a non-positive diagonal")
    diff = z - mean[..., None, :]
    # y = chol^{-1} (z - mean), one small inverse per datapoint rather than per particle
    y = diff @ np.swapaxes(np.linalg.inv(chol), -1, -2)
    half_logdet = np.log(diag).sum(axis=-1)
    return -0.5 * (y * y).sum(axis=-1) - half_logdet[..., None] - 0.5 * L * LOG_2PI


def gaussian_log_pdf(z, mean, logvar=None, cov=None):
    """Dispatch on covariance form: diagonal via ``logvar`` (differentiable) or full via ``cov``."""
    if (logvar is None) == (cov is None):
        raise ValueError("pass exactly one of logvar or cov")
    if logvar is not None:
        return diag_gaussian_log_pdf(z, mean, logvar)
    z = np.asarray(z, dtype=np.float64)
    squeeze = z.ndim == np.ndim(mean)
    zz = z[..., None, :] if squeeze else z
    out = full_gaussian_log_pdf(zz, mean, cholesky(np.asarray(cov, dtype=np.float64)))
    return out[..., 0] if squeeze else out


# ---------------------------------------------------------------------------
# networks


def _uniform_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _layer_params(spec, rng, zeros: bool) -> dict[str, Tensor]:
    params = {}
    for w_name, b_name, fan_in, fan_out in spec:
        W = np.zeros((fan_in, fan_out)) if zeros else _uniform_init(rng, fan_in, fan_out)
        params[w_name] = Tensor(W, requires_grad=True, name=w_name)
        params[b_name] = Tensor(np.zeros(fan_out), requires_grad=True, name=b_name)
    return params


def _check_finite(t: Tensor, net: str, layer: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{net}: non-finite activations after layer {layer}")
    return t


class _Module:
    prefix = ""
    params: dict[str, Tensor]

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.prefix}.{k}": v for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for key, t in self.parameters().items():
            value = np.asarray(arrays[key], dtype=np.float64)
            if value.shape != t.shape:
                raise ValueError(f"{key}: expected shape {t.shape}, got {value.shape}")
            t.data = value.copy()


def _broadcast_data(x: np.ndarray, z: Tensor) -> np.ndarray:
    # lines x (B, D) up against latents (B, K, L)
    x = np.asarray(x, dtype=np.float64)
    return x[..., None, :] if z.ndim == x.ndim + 1 else x


def bernoulli_log_lik(logits, x) -> Tensor:
    """sum_d x_d log sigmoid(l_d) + (1 - x_d) log(1 - sigmoid(l_d)), written as x*l - softplus(l)."""
    logits = ad.as_tensor(logits)
    return ad.sum(ad.mul(logits, x) - ad.softplus(logits), axis=-1)


class Decoder(_Module):
    """Two tanh layers and a logit output: the generative network with a standard normal prior."""

    prefix = "decoder"

    def __init__(self, latent_dim: int, data_dim: int, hidden: int = 200, rng=None, zeros: bool = False):
        if rng is None and not zeros:
            raise ValueError("Decoder needs an rng unless zero-initialized")
        self.latent_dim, self.data_dim, self.hidden = latent_dim, data_dim, hidden
        self.params = _layer_params(
            [
                ("W1", "b1", latent_dim, hidden),
                ("W2", "b2", hidden, hidden),
                ("Wout", "bout", hidden, data_dim),
            ],
            rng,
            zeros,
        )

    def logits(self, z) -> Tensor:
        p = self.params
        h = _check_finite(ad.tanh(ad.affine(z, p["W1"], p["b1"])), "decoder", "1")
        h = _check_finite(ad.tanh(ad.affine(h, p["W2"], p["b2"])), "decoder", "2")
        return _check_finite(ad.affine(h, p["Wout"], p["bout"]), "decoder", "out")

    def log_likelihood(self, x, z) -> Tensor:
        z = ad.as_tensor(z)
        return bernoulli_log_lik(self.logits(z), _broadcast_data(x, z))

    def log_prior(self, z) -> Tensor:
        return standard_normal_log_pdf(z)

    def log_joint(self, x, z) -> Tensor:
        z = ad.as_tensor(z)
        return self.log_likelihood(x, z) + self.log_prior(z)


class DiagonalGaussianProposal(_Module):
    """Shared sampling and density code for proposals r(z|x) = N(mean(x), diag(exp(logvar(x))))."""

    def params_of(self, x) -> tuple[Tensor, Tensor]:
        raise NotImplementedError

    def log_prob(self, x, z, moments: tuple[Tensor, Tensor] | None = None) -> Tensor:
        z = ad.as_tensor(z)
        mean, logvar = moments if moments is not None else self.params_of(x)
        if z.ndim == mean.ndim + 1:
            B, L = mean.shape
            mean, logvar = ad.reshape(mean, (B, 1, L)), ad.reshape(logvar, (B, 1, L))
        return diag_gaussian_log_pdf(z, mean, logvar)

    def sample(self, x, K: int, rng, moments: tuple[Tensor, Tensor] | None = None):
        """Reparameterized draws z = mean + exp(logvar/2) * eps, shape (B, K, L).

        Gradients reach the proposal's parameters through ``mean`` and ``logvar``.
        Returns ``(z, moments)`` so callers can reuse the forward pass.
        """
        mean, logvar = moments if moments is not None else self.params_of(x)
        B, L = mean.shape
        eps = rng.standard_normal((B, K, L))
        std = ad.exp(0.5 * ad.reshape(logvar, (B, 1, L)))
        z = ad.reshape(mean, (B, 1, L)) + std * eps
        return z, (mean, logvar)


class Encoder(DiagonalGaussianProposal):
    """Two tanh layers with linear mean and log-variance heads."""

    prefix = "encoder"

    def __init__(self, data_dim: int, latent_dim: int, hidden: int = 200, rng=None, zeros: bool = False):
        if rng is None and not zeros:
            raise ValueError("Encoder needs an rng unless zero-initialized")
        self.data_dim, self.latent_dim, self.hidden = data_dim, latent_dim, hidden
        self.params = _layer_params(
            [
                ("W1", "b1", data_dim, hidden),
                ("W2", "b2", hidden, hidden),
                ("Wmu", "bmu", hidden, latent_dim),
                ("Wlv", "blv", hidden, latent_dim),
            ],
            rng,
            zeros,
        )

    def params_of(self, x) -> tuple[Tensor, Tensor]:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.data_dim:
            raise ad.ShapeError(f"encoder: expected data dim {self.data_dim}, got {x.shape[-1]}")
        p = self.params
        h = _check_finite(ad.tanh(ad.affine(x, p["W1"], p["b1"])), "encoder", "1")
        h = _check_finite(ad.tanh(ad.affine(h, p["W2"], p["b2"])), "encoder", "2")
        mean = _check_finite(ad.affine(h, p["Wmu"], p["bmu"]), "encoder", "mean")
        logvar = _check_finite(ad.affine(h, p["Wlv"], p["blv"]), "encoder", "logvar")
        return mean, logvar


def encoder_params(encoder: DiagonalGaussianProposal, x) -> tuple[np.ndarray, np.ndarray]:
    mean, logvar = encoder.params_of(x)
    return mean.data, logvar.data


# ---------------------------------------------------------------------------
# linear-Gaussian oracle


class LinearGaussianModel(_Module):
    """x = A z + noise, z ~ N(0, I), noise ~ N(0, sigma2 I). Everything is available in closed form.

    ``A`` and ``log_sigma2`` are differentiable leaves so the same objectives
    and trainer that fit the deep model can fit this one.
    """

    prefix = "model"

    def __init__(self, A, sigma2: float):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2:
            raise ValueError(f"loading matrix must be 2-D, got shape {A.shape}")
        if not sigma2 > 0:
            raise ValueError(f"noise variance must be positive, got {sigma2}")
        self.params = {
            "A": Tensor(A, requires_grad=True, name="A"),
            "log_sigma2": Tensor(math.log(sigma2), requires_grad=True, name="log_sigma2"),
        }

    @classmethod
    def random(cls, data_dim: int, latent_dim: int, sigma2: float, rng, scale: float = 1.0):
        return cls(scale * rng.standard_normal((data_dim, latent_dim)), sigma2)

    @property
    def A(self) -> np.ndarray:
        return self.params["A"].data

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.params["log_sigma2"].data))

    @property
    def data_dim(self) -> int:
        return self.A.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.A.shape[1]

    def log_likelihood(self, x, z) -> Tensor:
        z = ad.as_tensor(z)
        A, log_s2 = self.params["A"], self.params["log_sigma2"]
        resid = _broadcast_data(x, z) - ad.matmul(z, ad.transpose(A))
        D = self.data_dim
        return -0.5 * ad.sum(ad.square(resid), axis=-1) * ad.exp(-log_s2) - 0.5 * D * (LOG_2PI + log_s2)

    def log_prior(self, z) -> Tensor:
        return standard_normal_log_pdf(z)

    def log_joint(self, x, z) -> Tensor:
        z = ad.as_tensor(z)
        return self.log_likelihood(x, z) + self.log_prior(z)

    def posterior_cov(self) -> np.ndarray:
        A, s2 = self.A, self.sigma2
        prec = np.eye(self.latent_dim) + A.T @ A / s2
        cov = np.linalg.inv(prec)
        # I + A^T A / s2 is PD for s2 > 0; a failure here means the numerics are broken
        assert np.all(np.isfinite(cov)) and np.all(np.linalg.eigvalsh(cov) > 0), "singular posterior precision"
        return 0.5 * (cov + cov.T)

    def posterior(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Exact p(z | x): mean (..., L) and the shared covariance (L, L)."""
        cov = self.posterior_cov()
        mean = np.asarray(x, dtype=np.float64) @ (self.A @ cov) / self.sigma2
        return mean, cov

    def marginal_cov(self) -> np.ndarray:
        return self.A @ self.A.T + self.sigma2 * np.eye(self.data_dim)

    def log_marginal(self, x) -> np.ndarray:
        """Exact log p(x) = log N(x; 0, A A^T + sigma2 I) per row."""
        x = np.asarray(x, dtype=np.float64)
        chol = cholesky(self.marginal_cov())
        return full_gaussian_log_pdf(x[None], np.zeros((1, self.data_dim)), chol[None])[0]

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        z = rng.standard_normal((n, self.latent_dim))
        x = z @ self.A.T + math.sqrt(self.sigma2) * rng.standard_normal((n, self.data_dim))
        return x, z

    def em_step(self, x) -> LinearGaussianModel:
        """One exact EM iteration: posterior moments, then the closed-form maximizer of A and sigma2."""
        x = np.asarray(x, dtype=np.float64)
        N, D = x.shape
        mean, cov = self.posterior(x)
        Ezz = N * cov + mean.T @ mean
        A_new = np.linalg.solve(Ezz, mean.T @ x).T
        resid = (
            np.sum(x * x)
            - 2.0 * np.sum((mean @ A_new.T) * x)
            + np.trace(Ezz @ A_new.T @ A_new)
        )
        return LinearGaussianModel(A_new, resid / (N * D))


class ExactPosteriorEncoder(DiagonalGaussianProposal):
    """Proposal equal to the exact posterior of a LinearGaussianModel whose posterior is diagonal.

    That holds when the columns of A are orthogonal. No trainable parameters.
    """

    prefix = "oracle"

    def __init__(self, model: LinearGaussianModel):
        cov = model.posterior_cov()
        off = cov - np.diag(np.diag(cov))
        if np.max(np.abs(off)) > 1e-12 * np.max(np.abs(cov)):
            raise ValueError("posterior covariance is not diagonal; use orthogonal loading columns")
        self.model = model
        self.params = {}
        self._logvar = np.log(np.diag(cov))

    def params_of(self, x) -> tuple[Tensor, Tensor]:
        mean, _ = self.model.posterior(x)
        return Tensor(mean), Tensor(np.broadcast_to(self._logvar, mean.shape).copy())


@dataclass
class ModelPair:
    """Generative network (theta) and recognition network (eta)."""

    model: Decoder | LinearGaussianModel
    encoder: DiagonalGaussianProposal

    def theta(self) -> dict[str, Tensor]:
        return self.model.parameters()

    def eta(self) -> dict[str, Tensor]:
        return self.encoder.parameters()

    def parameters(self) -> dict[str, Tensor]:
        return {**self.theta(), **self.eta()}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}
