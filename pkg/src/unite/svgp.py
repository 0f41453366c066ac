"""Sparse variational GP classification with a Bernoulli likelihood.

The inducing values ``u`` at locations ``Z`` have prior ``N(0, K_ZZ)`` and
variational posterior ``q(u) = N(Z alpha, sigma2 I)``. Given ``u``, the
latent function at fused vectors ``V`` is Gaussian with mean
``K_VZ K_ZZ^{-1} u`` and covariance ``K_VV - K_VZ K_ZZ^{-1} K_ZV``.

All heavy functions accept :class:`~unite.autodiff.Tensor` arguments so that
the Monte-Carlo ELBO is differentiable end to end; Monte-Carlo noise is
passed in explicitly (``eps_u``, ``eps_f``) so it can be frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernel import DEFAULT_JITTER, ard_rbf, jittered_cholesky


@dataclass
class VariationalState:
    Z: np.ndarray
    alpha: np.ndarray
    log_sigma2: float
    free_mean: bool = False

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        expected = self.Z.shape[0] if self.free_mean else self.Z.shape[1]
        if self.alpha.shape != (expected,):
            raise ValueError(f"alpha must have shape ({expected},), got {self.alpha.shape}")
        if self.Z.shape[0] < 1 or not np.isfinite(self.Z).all():
            raise ValueError("Z must have at least one finite row")

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def sigma2(self) -> float:
        return float(np.exp(self.log_sigma2))

    def mean(self) -> np.ndarray:
        return self.alpha.copy() if self.free_mean else self.Z @ self.alpha


@dataclass
class ConditionalGaussian:
    mean: np.ndarray
    covariance: np.ndarray

    @property
    def variance(self) -> np.ndarray:
        return np.diag(self.covariance) if self.covariance.ndim == 2 else self.covariance


@dataclass
class ElboEstimate:
    value: float
    likelihood_term: float
    kl_term: float
    n_samples: int
    std_error: float = float("nan")


def variational_mean(Z, alpha, free_mean: bool = False) -> Tensor:
    return ad.as_tensor(alpha) if free_mean else ad.matmul(Z, alpha)


def _projection(V, Z, log_l, jitter: float):
    """``L = chol(K_ZZ + jitter I)`` and ``A = L^{-1} K_ZV``."""
    Kzz = ard_rbf(Z, Z, log_l)
    L, _ = jittered_cholesky(Kzz, jitter)
    A = ad.solve_triangular(L, ard_rbf(Z, V, log_l), lower=True)
    return L, A


def conditional_moments(V, U, Z, log_lengthscales, jitter: float = DEFAULT_JITTER, clamp: bool = True):
    """Marginal moments of ``f(V) | u`` for each row of ``U`` (shape ``B x M``).

    Returns ``(mean, variance)`` with mean of shape ``N x B`` and variance of
    shape ``N``. ``U`` may also be a single ``M`` vector, giving an ``N`` mean.
    """
    L, A = _projection(V, Z, log_lengthscales, jitter)
    U = ad.as_tensor(U)
    W = ad.solve_triangular(L, ad.transpose(U) if U.ndim == 2 else U, lower=True)
    mean = ad.matmul(ad.transpose(A), W)
    var = 1.0 - ad.square(A).sum(axis=0)
    if clamp:
        var = ad.clamp_min(var, 0.0)
    return mean, var


def conditional_f_given_u(V, u, Z, lengthscales, jitter: float = DEFAULT_JITTER, full_cov: bool = False) -> ConditionalGaussian:
    """Numeric conditional ``f | u`` at ``V``; the covariance diagonal is clamped at zero."""
    log_l = np.log(np.asarray(lengthscales, dtype=float))
    V, Z, u = (np.asarray(x, dtype=float) for x in (V, Z, u))
    L, A = _projection(V, Z, log_l, jitter)
    mean = A.data.T @ ad.solve_triangular(L.data, u).data
    if full_cov:
        cov = ard_rbf(V, V, log_l).data - A.data.T @ A.data
        idx = np.diag_indices_from(cov)
        cov[idx] = np.maximum(cov[idx], 0.0)
        return ConditionalGaussian(mean, cov)
    return ConditionalGaussian(mean, np.maximum(1.0 - np.sum(A.data**2, axis=0), 0.0))


def sample_q_u(Z, alpha, log_sigma2, eps_u, free_mean: bool = False) -> Tensor:
    """Reparameterised draws ``u = mean + sqrt(sigma2) * eps`` (``eps_u`` is ``B x M``)."""
    m = variational_mean(Z, alpha, free_mean)
    return m + ad.exp(ad.as_tensor(log_sigma2) * 0.5) * np.asarray(eps_u, dtype=float)


def draw_q_u(state: VariationalState, B: int, seed) -> np.ndarray:
    if B < 1:
        raise ValueError("B must be at least 1")
    eps = np.random.default_rng(seed).standard_normal((B, state.M))
    return sample_q_u(state.Z, state.alpha, state.log_sigma2, eps, state.free_mean).data


def kl_q_p(Z, alpha, log_sigma2, L_zz: Tensor, free_mean: bool = False) -> Tensor:
    """``KL[N(m, sigma2 I) || N(0, K_ZZ)]`` given the Cholesky factor of ``K_ZZ``.

    ``0.5 * (sigma2 tr(K^{-1}) + m^T K^{-1} m - M + log det K - M log sigma2)``
    """
    L_zz = ad.as_tensor(L_zz)
    M = L_zz.shape[0]
    m = variational_mean(Z, alpha, free_mean)
    log_sigma2 = ad.as_tensor(log_sigma2)
    L_inv = ad.solve_triangular(L_zz, np.eye(M), lower=True)
    trace = ad.square(L_inv).sum()
    mahalanobis = ad.square(ad.solve_triangular(L_zz, m, lower=True)).sum()
    logdet = ad.log(ad.diag(L_zz)).sum() * 2.0
    return (ad.exp(log_sigma2) * trace + mahalanobis - M + logdet - log_sigma2 * M) * 0.5


def kl_divergence(state: VariationalState, K_zz) -> float:
    L = ad.cholesky(np.asarray(K_zz, dtype=float))
    return float(kl_q_p(state.Z, state.alpha, state.log_sigma2, L, state.free_mean).data)


def bernoulli_log_lik(y, f) -> Tensor:
    """Elementwise ``y log s(f) + (1 - y) log(1 - s(f))`` in log-sigmoid form."""
    y = np.asarray(y, dtype=float)
    f = ad.as_tensor(f)
    return ad.log_sigmoid(f) * y + ad.log_sigmoid(-f) * (1.0 - y)


@dataclass
class ElboTerms:
    value: Tensor
    likelihood: Tensor
    kl: Tensor
    per_sample: np.ndarray


def elbo(
    V,
    y,
    Z,
    alpha,
    log_sigma2,
    log_lengthscales,
    eps_u,
    eps_f,
    total_count: int | None = None,
    jitter: float = DEFAULT_JITTER,
    free_mean: bool = False,
) -> ElboTerms:
    """Monte-Carlo evidence lower bound for a batch of latent vectors.

    ``eps_u`` (``B x M``) drives the draws of ``u`` shared by the batch and
    ``eps_f`` (``N x B``) the per-patient draws of ``f | u``. The likelihood
    term is scaled by ``total_count / N`` so minibatch estimates are unbiased
    for the full data set.
    """
    V = ad.as_tensor(V)
    y = np.asarray(y, dtype=float)
    N = V.shape[0]
    if N == 0:
        raise ValueError("empty batch")
    eps_f = np.asarray(eps_f, dtype=float)
    B = eps_f.shape[1]
    scale = (total_count if total_count is not None else N) / N

    Kzz = ard_rbf(Z, Z, log_lengthscales)
    L, _ = jittered_cholesky(Kzz, jitter)
    A = ad.solve_triangular(L, ard_rbf(Z, V, log_lengthscales), lower=True)
    U = sample_q_u(Z, alpha, log_sigma2, eps_u, free_mean)
    f_mean = ad.matmul(ad.transpose(A), ad.solve_triangular(L, ad.transpose(U), lower=True))
    f_var = ad.clamp_min(1.0 - ad.square(A).sum(axis=0), 0.0)
    f = f_mean + ad.reshape(ad.sqrt(f_var), (N, 1)) * eps_f
    ll = bernoulli_log_lik(y[:, None], f)
    per_sample = ll.data.sum(axis=0) * scale
    likelihood = ll.sum() * (scale / B)
    kl = kl_q_p(Z, alpha, log_sigma2, L, free_mean)
    return ElboTerms(likelihood - kl, likelihood, kl, per_sample)


def elbo_estimate(
    V, y, state: VariationalState, lengthscales, B: int, seed, total_count: int | None = None, jitter: float = DEFAULT_JITTER
) -> ElboEstimate:
    """Numeric ELBO with fresh noise, plus the Monte-Carlo standard error."""
    V = np.asarray(V, dtype=float)
    rng = np.random.default_rng(seed)
    eps_u = rng.standard_normal((B, state.M))
    eps_f = rng.standard_normal((V.shape[0], B))
    terms = elbo(V, y, state.Z, state.alpha, state.log_sigma2, np.log(np.asarray(lengthscales, dtype=float)),
                 eps_u, eps_f, total_count, jitter, state.free_mean)
    se = float(terms.per_sample.std(ddof=1) / np.sqrt(B)) if B > 1 else float("nan")
    return ElboEstimate(float(terms.value.data), float(terms.likelihood.data), float(terms.kl.data), B, se)
