"""EM helpers used to choose component counts and to build starting values.

* ``gmm_em`` fits a univariate Gaussian mixture, ``select_components`` picks
  the number of components by BIC.
* ``mixreg_em`` fits a mixture of linear regressions; its intercepts seed
  the intercept priors of real-data presets and the latent-mixture start.
* ``regression_anchor`` gives a cheap data-implied start for the latent
  scores of either SEM.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .kernels import LOG_2PI, substream

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6


class InsufficientDataError(ValueError):
    pass


class SingularDesignError(ValueError):
    pass


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    top = a.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(a - top).sum(axis=1, keepdims=True)))[:, 0]


def _kmeanspp(values: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [values[rng.integers(values.shape[0])]]
    for _ in range(1, k):
        d2 = np.min((values[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0:
            centers.append(values[rng.integers(values.shape[0])])
        else:
            centers.append(values[rng.choice(values.shape[0], p=d2 / total)])
    return np.sort(np.asarray(centers, dtype=float))


@dataclass
class GMMResult:
    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    loglik: float
    converged: bool
    loglik_trace: list[float] = field(default_factory=list)


def _gmm_loglik_parts(values, means, variances, weights):
    logp = (np.log(weights) - 0.5 * (LOG_2PI + np.log(variances))
            - 0.5 * (values[:, None] - means) ** 2 / variances)
    return logp, _logsumexp_rows(logp)


def _gmm_single(values, H, rng, tol, max_iter, floor) -> GMMResult:
    n = values.shape[0]
    means = _kmeanspp(values, H, rng)
    variances = np.full(H, max(values.var(), floor))
    weights = np.full(H, 1.0 / H)
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        logp, norm = _gmm_loglik_parts(values, means, variances, weights)
        ll = float(norm.sum())
        trace.append(ll)
        if len(trace) > 1 and abs(ll - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        # a component that lost every point keeps its parameters but gets a tiny weight
        nk_safe = np.maximum(nk, 1e-300)
        weights = np.maximum(nk / n, 1e-300)
        weights /= weights.sum()
        means = (resp * values[:, None]).sum(axis=0) / nk_safe
        variances = (resp * (values[:, None] - means) ** 2).sum(axis=0) / nk_safe
        variances = np.maximum(variances, floor)
    order = np.argsort(means, kind="stable")
    return GMMResult(means[order], variances[order], weights[order], trace[-1], converged, trace)


def gmm_em(values, H: int, restarts: int = 10, tol: float = 1e-8,
           rng: np.random.Generator | None = None, max_iter: int = 1000) -> GMMResult:
    """Best of ``restarts`` EM runs for an H-component univariate Gaussian mixture.

    Components are returned sorted by mean.  Variances are floored at
    ``1e-6 * var(values)``.
    """
    values = np.asarray(values, dtype=float).ravel()
    if H < 1:
        raise ValueError("H must be at least 1")
    if values.shape[0] < 2 * H:
        raise InsufficientDataError(f"need at least {2 * H} values for {H} components, got {values.shape[0]}")
    var = float(values.var())
    floor = VARIANCE_FLOOR * var if var > 0 else VARIANCE_FLOOR
    if H == 1:
        v = max(var, floor)
        mean = float(values.mean())
        ll = float(np.sum(-0.5 * (LOG_2PI + np.log(v)) - 0.5 * (values - mean) ** 2 / v))
        return GMMResult(np.array([mean]), np.array([v]), np.array([1.0]), ll, True, [ll])
    rng = rng if rng is not None else substream(0)
    best = None
    for _ in range(max(1, restarts)):
        res = _gmm_single(values, H, rng, tol, max_iter, floor)
        if best is None or res.loglik > best.loglik:
            best = res
    return best


def bic(loglik: float, H: int, n: int) -> float:
    return -2.0 * loglik + (3 * H - 1) * np.log(n)


def bic_scores(values, H_max: int, seed: int = 0, restarts: int = 10) -> list[float]:
    """BIC for H = 1..H_max (inf where there are too few values for H components)."""
    if H_max < 1:
        raise ValueError("H_max must be at least 1")
    values = np.asarray(values, dtype=float).ravel()
    n = values.shape[0]
    scores = []
    for H in range(1, H_max + 1):
        if n < 2 * H:
            scores.append(float("inf"))
            continue
        res = gmm_em(values, H, restarts=restarts, rng=substream(seed, H))
        scores.append(float(bic(res.loglik, H, n)))
    return scores


def select_components(values, H_max: int, seed: int = 0, restarts: int = 10) -> int:
    """Number of components in 1..H_max minimizing BIC; ties go to the smaller count."""
    scores = bic_scores(values, H_max, seed, restarts)
    return int(np.argmin(scores)) + 1


@dataclass
class MixRegResult:
    intercepts: np.ndarray
    coefficients: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    loglik: float
    converged: bool
    loglik_trace: list[float] = field(default_factory=list)


def _design(X: np.ndarray, n: int) -> np.ndarray:
    Z = np.column_stack([np.ones(n), X])
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise SingularDesignError("design matrix [1, X] is rank deficient")
    return Z


def _mixreg_single(y, Z, K, rng, tol, max_iter, floor) -> MixRegResult:
    n, d = Z.shape
    coef0, *_ = np.linalg.lstsq(Z, y, rcond=None)
    resid = y - Z @ coef0
    shifts = _kmeanspp(resid, K, rng)
    coefs = np.tile(coef0, (K, 1))
    coefs[:, 0] += shifts
    variances = np.full(K, max(resid.var() / K, floor))
    weights = np.full(K, 1.0 / K)
    trace: list[float] = []
    converged = False
    for _ in range(max_iter):
        fitted = Z @ coefs.T
        logp = (np.log(weights) - 0.5 * (LOG_2PI + np.log(variances))
                - 0.5 * (y[:, None] - fitted) ** 2 / variances)
        norm = _logsumexp_rows(logp)
        ll = float(norm.sum())
        trace.append(ll)
        if len(trace) > 1 and abs(ll - trace[-2]) <= tol * abs(trace[-2]):
            converged = True
            break
        resp = np.exp(logp - norm[:, None])
        nk = resp.sum(axis=0)
        weights = np.maximum(nk / n, 1e-300)
        weights /= weights.sum()
        for k in range(K):
            if nk[k] < 1e-8:
                continue
            sw = np.sqrt(resp[:, k])
            coefs[k], *_ = np.linalg.lstsq(Z * sw[:, None], y * sw, rcond=None)
            r = y - Z @ coefs[k]
            variances[k] = max(float(resp[:, k] @ (r * r)) / nk[k], floor)
    order = np.argsort(coefs[:, 0], kind="stable")
    coefs = coefs[order]
    return MixRegResult(coefs[:, 0].copy(), coefs[:, 1:].copy(), variances[order], weights[order],
                        trace[-1], converged, trace)


def mixreg_em(y, X, K: int, restarts: int = 10, tol: float = 1e-8,
              rng: np.random.Generator | None = None, max_iter: int = 1000) -> MixRegResult:
    """Mixture of K linear regressions of ``y`` on ``[1, X]``, best of ``restarts``.

    Components are returned sorted by intercept.  K = 1 is ordinary least
    squares with the maximum-likelihood variance.
    """
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    X = np.asarray(X, dtype=float).reshape(n, -1)
    p = X.shape[1]
    if K < 1:
        raise ValueError("K must be at least 1")
    if n <= K * (p + 2):
        raise InsufficientDataError(f"need more than {K * (p + 2)} observations, got {n}")
    Z = _design(X, n)
    var = float(y.var())
    floor = VARIANCE_FLOOR * var if var > 0 else VARIANCE_FLOOR
    if K == 1:
        coef, *_ = np.linalg.lstsq(Z, y, rcond=None)
        r = y - Z @ coef
        v = max(float(r @ r) / n, floor)
        ll = float(np.sum(-0.5 * (LOG_2PI + np.log(v)) - 0.5 * r * r / v))
        return MixRegResult(coef[:1].copy(), coef[None, 1:].copy(), np.array([v]), np.array([1.0]), ll, True, [ll])
    rng = rng if rng is not None else substream(0)
    best = None
    for _ in range(max(1, restarts)):
        res = _mixreg_single(y, Z, K, rng, tol, max_iter, floor)
        if best is None or res.loglik > best.loglik:
            best = res
    return best


@dataclass
class Anchor:
    """Data-implied starting values for the structural part of either SEM."""

    beta: np.ndarray
    sigma2: float
    eta: np.ndarray
    lam: np.ndarray


def regression_anchor(ds: Dataset) -> Anchor:
    """OLS of the first outcome (loading fixed at 1) on ``[1, x]``.

    The slopes start beta, the fitted values ``x' beta`` start the latent
    scores, and half of the residual variance starts sigma2 (the other half
    is attributed to measurement noise).  Later loadings start at their
    OLS slope on the starting scores.
    """
    obs = ds.observed[:, 0]
    lam = np.ones(ds.m)
    if ds.p == 0 or obs.sum() <= ds.p + 1:
        y0 = ds.y[obs, 0]
        return Anchor(np.zeros(ds.p), max(0.5 * float(y0.var()), 1e-8), np.zeros(ds.n), lam)
    Z = np.column_stack([np.ones(int(obs.sum())), ds.x[obs]])
    coef, *_ = np.linalg.lstsq(Z, ds.y[obs, 0], rcond=None)
    resid = ds.y[obs, 0] - Z @ coef
    beta = coef[1:]
    eta = ds.x @ beta
    sigma2 = max(0.5 * float(resid.var()), 1e-8)
    for j in range(1, ds.m):
        o = ds.observed[:, j]
        e = eta[o]
        v = float(e.var())
        if o.sum() > 1 and v > 0:
            lam[j] = float(np.mean((e - e.mean()) * (ds.y[o, j] - ds.y[o, j].mean()))) / v
    return Anchor(beta, sigma2, eta, lam)


def mixreg_responsibilities(res: MixRegResult, y, X) -> np.ndarray:
    """Posterior component probabilities of each observation under a fitted mixture."""
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float).reshape(y.shape[0], -1)
    fitted = res.intercepts[None, :] + X @ res.coefficients.T
    logp = (np.log(res.weights) - 0.5 * (LOG_2PI + np.log(res.variances))
            - 0.5 * (y[:, None] - fitted) ** 2 / res.variances)
    return np.exp(logp - _logsumexp_rows(logp)[:, None])


def intercept_prior_means(ds: Dataset, H, seed: int = 0, restarts: int = 10) -> list[list[float]]:
    """Per-outcome intercept prior means from regressions of each outcome on the covariates.

    Outcomes with several components use the sorted intercepts of a
    mixture of regressions; single-component outcomes use the OLS intercept.
    """
    out = []
    for j, h in enumerate(H):
        obs = ds.observed[:, j]
        res = mixreg_em(ds.y[obs, j], ds.x[obs], int(h), restarts=restarts, rng=substream(seed, j))
        out.append([float(v) for v in res.intercepts])
    return out
