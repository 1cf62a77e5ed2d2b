"""Numerical building blocks shared by both variational fitters.

Holds the digamma function, the Gaussian quadratic-form expectation ``G``
written in natural parameters, moment helpers for the Inverse-Gamma and
Dirichlet factors, and the seedable samplers used for Monte-Carlo criteria,
posterior-predictive draws and the simulation harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

# Bernoulli-number coefficients B_2k / (2k) of the asymptotic digamma series.
_DIGAMMA_SERIES = (
    1.0 / 12.0,
    -1.0 / 120.0,
    1.0 / 252.0,
    -1.0 / 240.0,
    1.0 / 132.0,
    -691.0 / 32760.0,
    1.0 / 12.0,
)
_DIGAMMA_SHIFT = 12.0


class DomainError(ValueError):
    """Argument outside the domain of a special function or distribution."""


class SingularMatrixError(ArithmeticError):
    pass


def digamma(x):
    """Digamma function for positive real arguments.

    Arguments below 12 are shifted upward with psi(x) = psi(x + 1) - 1/x,
    then the asymptotic expansion is applied.  Works elementwise on arrays;
    a scalar input gives a Python float.
    """
    arr = np.asarray(x, dtype=float)
    if not np.all(arr > 0):
        raise DomainError(f"digamma requires x > 0, got {x!r}")
    z = np.array(arr, dtype=float, copy=True, ndmin=1)
    shift = np.zeros_like(z)
    small = z < _DIGAMMA_SHIFT
    while np.any(small):
        shift[small] -= 1.0 / z[small]
        z[small] += 1.0
        small = z < _DIGAMMA_SHIFT
    inv2 = 1.0 / (z * z)
    series = np.zeros_like(z)
    for coef in reversed(_DIGAMMA_SERIES):
        series = (series + coef) * inv2
    out = shift + np.log(z) - 0.5 / z - series
    if arr.ndim == 0:
        return float(out[0])
    return out.reshape(arr.shape)


@dataclass(frozen=True)
class NaturalGaussianParams:
    """Natural parameters of a d-variate Gaussian.

    ``v1 = Sigma^{-1} mu`` and ``v2 = vec(-Sigma^{-1} / 2)``.
    """

    v1: np.ndarray
    v2: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov) -> "NaturalGaussianParams":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        prec = _inverse(cov)
        prec = 0.5 * (prec + prec.T)
        return cls(v1=prec @ mean, v2=(-0.5 * prec).reshape(-1, order="F"))

    @property
    def dim(self) -> int:
        return self.v1.shape[0]

    def matrix(self) -> np.ndarray:
        d = self.dim
        return np.asarray(self.v2, dtype=float).reshape(d, d, order="F")

    def to_moments(self) -> tuple[np.ndarray, np.ndarray]:
        cov = -0.5 * _inverse(self.matrix())
        cov = 0.5 * (cov + cov.T)
        return cov @ self.v1, cov


def _inverse(a: np.ndarray) -> np.ndarray:
    try:
        out = np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(f"matrix is singular: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise SingularMatrixError("matrix inverse is not finite")
    return out


def _as_natural(params) -> NaturalGaussianParams:
    if isinstance(params, NaturalGaussianParams):
        return params
    if isinstance(params, tuple) and len(params) == 2:
        v1 = np.atleast_1d(np.asarray(params[0], dtype=float))
        return NaturalGaussianParams(v1, np.asarray(params[1], dtype=float).ravel())
    stacked = np.asarray(params, dtype=float).ravel()
    # stacked [v1; v2] has length d + d^2
    d = int(round((-1 + np.sqrt(1 + 4 * stacked.size)) / 2))
    if d + d * d != stacked.size:
        raise ValueError(f"cannot split vector of length {stacked.size} into (v1, v2)")
    return NaturalGaussianParams(stacked[:d], stacked[d:])


def g_quadratic(params, Q, r, s) -> float:
    """Expectation of ``-(b'Qb - 2r'b + s)/2`` for b Gaussian with natural params.

    Evaluates -(1/8) tr(Q V^{-1}[v1 v1' V^{-1} - 2I]) - (1/2) r' V^{-1} v1 - s/2
    with V = vec^{-1}(v2), going through the mean/covariance form once.
    ``params`` may be a NaturalGaussianParams, a ``(v1, v2)`` tuple or the
    stacked vector.
    """
    eta = _as_natural(params)
    d = eta.dim
    Q = np.asarray(Q, dtype=float).reshape(d, d)
    r = np.asarray(r, dtype=float).reshape(d)
    v_inv = _inverse(eta.matrix())
    mean = -0.5 * v_inv @ eta.v1
    cov = -0.5 * v_inv
    return float(-0.5 * (mean @ Q @ mean + np.sum(Q * cov.T) - 2.0 * r @ mean + s))


def g_quadratic_rows(params, X, r_scale, s) -> np.ndarray:
    """Row-wise ``G(params; x_i x_i', r_scale_i x_i, s_i)`` for a design matrix X."""
    eta = _as_natural(params)
    X = np.asarray(X, dtype=float)
    if eta.dim == 0:
        return -0.5 * np.asarray(s, dtype=float)
    mean, cov = eta.to_moments()
    lin = X @ mean
    quad = np.einsum("ij,jk,ik->i", X, cov, X)
    return -0.5 * (lin * lin + quad - 2.0 * np.asarray(r_scale) * lin + np.asarray(s))


class InverseGammaMoments(NamedTuple):
    mean_inv: object
    mean_log: object
    mean: object


def inverse_gamma_moments(alpha, beta) -> InverseGammaMoments:
    """E[1/x], E[log x] and E[x] of an Inverse-Gamma(alpha, beta) variable.

    ``mean`` is None for a scalar alpha <= 1 (and NaN entries for arrays).
    """
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if not (np.all(a > 0) and np.all(b > 0)):
        raise DomainError("Inverse-Gamma parameters must be positive")
    mean_inv = a / b
    mean_log = np.log(b) - digamma(a)
    if a.ndim == 0 and b.ndim == 0:
        mean = float(b / (a - 1.0)) if a > 1 else None
        return InverseGammaMoments(float(mean_inv), float(mean_log), mean)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(a > 1, b / (a - 1.0), np.nan)
    return InverseGammaMoments(mean_inv, mean_log, mean)


def dirichlet_log_expectations(alpha) -> np.ndarray:
    """E[log w_h] = digamma(alpha_h) - digamma(sum alpha) along the last axis."""
    a = np.asarray(alpha, dtype=float)
    if not np.all(a > 0):
        raise DomainError("Dirichlet parameters must be positive")
    return digamma(a) - digamma(a.sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------- samplers


def substream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the experiment unit ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


def draw_normal(mu, sigma2, rng: np.random.Generator, size=None):
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 < 0) or not np.all(np.isfinite(sigma2)):
        raise DomainError("normal variance must be finite and non-negative")
    shape = size if size is not None else np.broadcast(np.asarray(mu), sigma2).shape
    z = rng.standard_normal(shape)
    return mu + np.sqrt(sigma2) * z


def draw_mvnormal(mu, Sigma, rng: np.random.Generator, size=None):
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    d = mu.shape[0]
    if Sigma.shape != (d, d) or not np.allclose(Sigma, Sigma.T, rtol=1e-10, atol=1e-14):
        raise DomainError("covariance must be a symmetric d x d matrix")
    root = _matrix_root(Sigma)
    n = 1 if size is None else int(np.prod(size))
    z = rng.standard_normal((n, d))
    out = mu + z @ root.T
    if size is None:
        return out[0]
    return out.reshape(tuple(np.atleast_1d(size)) + (d,))


def _matrix_root(Sigma: np.ndarray) -> np.ndarray:
    if Sigma.size == 0:
        return Sigma
    try:
        return np.linalg.cholesky(Sigma)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(Sigma)
        if vals.min() < -1e-10 * max(1.0, abs(vals.max())):
            raise DomainError("covariance is not positive semi-definite") from None
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def draw_inverse_gamma(alpha, beta, rng: np.random.Generator, size=None):
    a = np.asarray(alpha, dtype=float)
    b = np.asarray(beta, dtype=float)
    if not (np.all(a > 0) and np.all(b > 0)):
        raise DomainError("Inverse-Gamma shape and rate must be positive")
    return 1.0 / rng.gamma(a, 1.0 / b, size=size)


def draw_dirichlet(alpha, rng: np.random.Generator, size=None):
    """Dirichlet draws along the last axis; the last weight closes the simplex."""
    a = np.asarray(alpha, dtype=float)
    if a.ndim != 1 or not np.all(a > 0):
        raise DomainError("Dirichlet concentration must be a positive vector")
    shape = (() if size is None else tuple(np.atleast_1d(size))) + a.shape
    g = rng.gamma(np.broadcast_to(a, shape), 1.0)
    w = g / g.sum(axis=-1, keepdims=True)
    w[..., -1] = 1.0 - w[..., :-1].sum(axis=-1)
    return w


def draw_categorical(probs, rng: np.random.Generator, size=None):
    """Category indices; ``probs`` is one simplex vector or a stack of them."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-9):
        raise DomainError("category probabilities must be non-negative and sum to 1")
    cdf = np.cumsum(p, axis=-1)
    if p.ndim == 1:
        u = rng.random(size)
        idx = np.searchsorted(cdf, np.asarray(u) * cdf[-1], side="right")
        return np.minimum(idx, p.shape[0] - 1)
    u = rng.random(p.shape[:-1] if size is None else size)
    idx = (u[..., None] * cdf[..., -1:] >= cdf).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)
