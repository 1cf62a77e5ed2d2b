"""Numerical reference for single-block coordinate updates.

For a target block b the optimal factor is proportional to
exp(E_{-b} log p(y, theta)).  Here the log joint is written out term by term
from the generative model, each expectation over the other blocks is taken by
quadrature against their current q-densities (Gauss-Hermite for Gaussians,
Gauss-Legendre on log or logit scales for Inverse-Gamma and Beta factors,
enumeration for categoricals), and the resulting unnormalized density of b
is normalized on a fine Gauss-Legendre grid.  Its moments are then turned
back into the parameters of the matching family.

No closed-form update, digamma routine or G-function from the package is used.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import optimize
from scipy.special import gammaln, roots_hermite, roots_legendre

GH_X, GH_W = roots_hermite(6)
GL_X, GL_W = roots_legendre(400)
GL2_X, GL2_W = roots_legendre(90)


# ---- block quadratures -----------------------------------------------------


@dataclass
class Rule:
    nodes: np.ndarray  # n x d
    weights: np.ndarray  # n, sums to 1


def gaussian_rule(mean: float, var: float) -> Rule:
    if var == 0:
        return Rule(np.array([[mean]]), np.array([1.0]))
    return Rule((mean + np.sqrt(2 * var) * GH_X)[:, None], GH_W / np.sqrt(np.pi))


def mvgaussian_rule(mean: np.ndarray, cov: np.ndarray) -> Rule:
    d = mean.shape[0]
    grids = np.meshgrid(*([GH_X] * d), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=1)
    w = np.prod(np.stack(np.meshgrid(*([GH_W] * d), indexing="ij"), axis=0).reshape(d, -1), axis=0)
    L = np.linalg.cholesky(cov)
    return Rule(mean + np.sqrt(2) * z @ L.T, w / np.pi ** (d / 2))


def _normalized_gl(logdens: Callable, lo: float, hi: float, x=GL_X, w=GL_W):
    z = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    lp = logdens(z)
    wt = w * np.exp(lp - lp.max())
    return z, wt / wt.sum()


def inverse_gamma_rule(alpha: float, beta: float) -> Rule:
    """Nodes in psi2 from a grid in u = log psi2 (density includes the Jacobian)."""
    mode = np.log(beta / alpha)
    lo, hi = mode - 7.0, mode + 45.0 / alpha + 8.0
    u, w = _normalized_gl(lambda u: -alpha * u - beta * np.exp(-u), lo, hi)
    return Rule(np.exp(u)[:, None], w)


def beta2_rule(a1: float, a2: float) -> Rule:
    """Two-component Dirichlet on a logit grid; nodes are (w1, w2)."""
    mode = np.log(a1 / a2)
    lo, hi = mode - 45.0 / a1 - 8.0, mode + 45.0 / a2 + 8.0
    logw1 = lambda t: -np.logaddexp(0.0, -t)
    logw2 = lambda t: -np.logaddexp(0.0, t)
    t, w = _normalized_gl(lambda t: a1 * logw1(t) + a2 * logw2(t), lo, hi)
    w1 = np.exp(logw1(t))
    return Rule(np.stack([w1, np.exp(logw2(t))], axis=1), w)


def categorical_rule(probs: np.ndarray) -> Rule:
    H = probs.shape[0]
    return Rule(np.eye(H), np.asarray(probs, dtype=float))


# ---- log joint as a sum of products of block functions ----------------------


@dataclass
class Factor:
    blocks: tuple
    fn: Callable  # dict block -> array (..., d) -> array (...)


@dataclass
class Term:
    coef: float
    factors: list = field(default_factory=list)

    def blocks(self):
        return {b for f in self.factors for b in f.blocks}


def _factor_expectation(factor: Factor, rules: dict, target=None, grid=None) -> np.ndarray:
    """E over every non-target block of the factor; returns shape (G,) or scalar."""
    others = [b for b in factor.blocks if b != target]
    k = len(others)
    vals = {}
    weight = np.ones([1] * (k + 1))
    for axis, b in enumerate(others, start=1):
        r = rules[b]
        shape = [1] * (k + 1)
        shape[axis] = r.nodes.shape[0]
        vals[b] = r.nodes.reshape(shape + [r.nodes.shape[1]])
        weight = weight * r.weights.reshape(shape)
    if target is not None:
        shape = [grid.shape[0]] + [1] * k
        vals[target] = grid.reshape(shape + [grid.shape[1]])
    out = factor.fn(vals) * weight
    out = np.broadcast_to(out, np.broadcast_shapes(out.shape, weight.shape))
    return out.reshape(out.shape[0], -1).sum(axis=1) if target is not None else float(out.sum())


def expected_log_joint(terms: list[Term], rules: dict, target, grid: np.ndarray) -> np.ndarray:
    """E_{-target} log p(y, theta) at each grid value of the target (up to a constant)."""
    total = np.zeros(grid.shape[0])
    for term in terms:
        if target not in term.blocks():
            continue
        val = np.full(grid.shape[0], term.coef)
        for f in term.factors:
            if target in f.blocks:
                val = val * _factor_expectation(f, rules, target, grid)
            else:
                val = val * _factor_expectation(f, rules)
        total += val
    return total


# ---- normalizing the optimal factor ---------------------------------------


def _mode_1d(logdens, start: float) -> float:
    res = optimize.minimize_scalar(lambda z: -logdens(np.array([z]))[0], bracket=(start - 1.0, start + 1.0))
    return float(res.x)


def _curvature_1d(logdens, z0: float) -> float:
    h = 1e-3 * max(1.0, abs(z0))
    f = logdens(np.array([z0 - h, z0, z0 + h]))
    return max(-(f[0] - 2 * f[1] + f[2]) / h**2, 1e-12)


def _range_1d(logdens, z0: float, drop: float = 90.0):
    step = 1.0 / np.sqrt(_curvature_1d(logdens, z0))
    top = logdens(np.array([z0]))[0]
    lo, hi = z0 - 4 * step, z0 + 4 * step
    while logdens(np.array([lo]))[0] > top - drop:
        lo -= 2 * step
    while logdens(np.array([hi]))[0] > top - drop:
        hi += 2 * step
    return lo, hi


def normalized_1d(logdens, start: float = 0.0):
    z0 = _mode_1d(logdens, start)
    lo, hi = _range_1d(logdens, z0)
    return _normalized_gl(logdens, lo, hi)


def gaussian_optimum(terms, rules, target, start=0.0):
    """(mean, variance) of the optimal factor of a scalar Gaussian block."""
    f = lambda z: expected_log_joint(terms, rules, target, z[:, None])
    z, w = normalized_1d(f, start)
    mean = float(w @ z)
    return mean, float(w @ (z - mean) ** 2)


def mvgaussian_optimum(terms, rules, target, d: int):
    """(mean, covariance) of a d-dimensional (d <= 2) Gaussian block."""
    f = lambda z: expected_log_joint(terms, rules, target, np.atleast_2d(z))
    res = optimize.minimize(lambda z: -f(z[None])[0], np.zeros(d), method="BFGS", options={"gtol": 1e-10})
    z0 = res.x
    h = 1e-3
    E = np.eye(d) * h
    hess = np.empty((d, d))
    for a in range(d):
        for b in range(d):
            pts = np.stack([z0 + E[a] + E[b], z0 + E[a] - E[b], z0 - E[a] + E[b], z0 - E[a] - E[b]])
            v = f(pts)
            hess[a, b] = -(v[0] - v[1] - v[2] + v[3]) / (4 * h * h)
    hess = 0.5 * (hess + hess.T)
    L = np.linalg.cholesky(np.linalg.inv(hess))
    half = 14.0
    x = half * GL2_X
    grids = np.meshgrid(*([x] * d), indexing="ij")
    u = np.stack([g.ravel() for g in grids], axis=1)
    wq = np.prod(np.stack(np.meshgrid(*([GL2_W] * d), indexing="ij"), axis=0).reshape(d, -1), axis=0)
    pts = z0 + u @ L.T
    lp = f(pts)
    wt = wq * np.exp(lp - lp.max())
    wt /= wt.sum()
    mean = wt @ pts
    dev = pts - mean
    return mean, (dev * wt[:, None]).T @ dev


def inverse_gamma_optimum(terms, rules, target):
    """(alpha, beta, E[1/psi2], E[log psi2]) of an Inverse-Gamma block, via the grid in log psi2."""
    f = lambda u: expected_log_joint(terms, rules, target, np.exp(u)[:, None]) + u
    u, w = normalized_1d(f, 0.0)
    tau = np.exp(-u)
    m1 = float(w @ tau)
    var = float(w @ (tau - m1) ** 2)
    return m1 * m1 / var, m1 / var, m1, float(w @ u)


def dirichlet2_optimum(terms, rules, target):
    """(alpha_1, alpha_2, E[log w1], E[log w2]) of a two-component Dirichlet block."""
    def f(t):
        l1, l2 = -np.logaddexp(0.0, -t), -np.logaddexp(0.0, t)
        grid = np.stack([np.exp(l1), np.exp(l2)], axis=1)
        return expected_log_joint(terms, rules, target, grid) + l1 + l2
    t, w = normalized_1d(f, 0.0)
    w1 = np.exp(-np.logaddexp(0.0, -t))
    m = float(w @ w1)
    v = float(w @ (w1 - m) ** 2)
    total = m * (1 - m) / v - 1.0
    return m * total, (1 - m) * total, float(w @ -np.logaddexp(0.0, -t)), float(w @ -np.logaddexp(0.0, t))


def categorical_optimum(terms, rules, target, H: int):
    f = expected_log_joint(terms, rules, target, np.eye(H))
    p = np.exp(f - f.max())
    return p / p.sum()


# ---- model log joints --------------------------------------------------------


def _s(v):
    return v[..., 0]


def outcome_terms(spec, ds) -> list[Term]:
    """Log joint of the outcome-mixture model with indicators, as product terms."""
    terms: list[Term] = []
    y, obs, x = ds.y, ds.observed, ds.x
    for i in range(ds.n):
        for j in range(ds.m):
            if not obs[i, j]:
                continue
            H = spec.H[j]
            for h in range(H):
                a = [Factor((("a", i, j),), lambda V, i=i, j=j, h=h: V[("a", i, j)][..., h])] if H > 1 else []
                if H > 1:
                    terms.append(Term(1.0, a + [Factor((("w", j),), lambda V, j=j, h=h: np.log(V[("w", j)][..., h]))]))
                terms.append(Term(-0.5 * np.log(2 * np.pi), list(a)))
                terms.append(Term(-0.5, a + [Factor((("psi2", j, h),), lambda V, j=j, h=h: np.log(_s(V[("psi2", j, h)])))]))
                mean_blocks = (("mu", j, h), ("eta", i)) + ((("lam", j),) if j > 0 else ())

                def sq(V, i=i, j=j, h=h):
                    lam = _s(V[("lam", j)]) if j > 0 else 1.0
                    r = y[i, j] - _s(V[("mu", j, h)]) - lam * _s(V[("eta", i)])
                    return r * r
                terms.append(Term(-0.5, a + [
                    Factor((("psi2", j, h),), lambda V, j=j, h=h: 1.0 / _s(V[("psi2", j, h)])),
                    Factor(mean_blocks, sq),
                ]))
    for i in range(ds.n):
        terms.append(Term(-0.5, [Factor((("sigma2",),), lambda V: np.log(_s(V[("sigma2",)])))]))

        def ssq(V, i=i):
            r = _s(V[("eta", i)]) - V[("beta",)] @ x[i]
            return r * r
        terms.append(Term(-0.5, [Factor((("sigma2",),), lambda V: 1.0 / _s(V[("sigma2",)])),
                                 Factor((("eta", i), ("beta",)), ssq)]))
    for j, H in enumerate(spec.H):
        for h in range(H):
            m, s2 = spec.mu_mu[j, h], spec.sigma2_mu[j, h]
            terms.append(Term(-0.5 / s2, [Factor((("mu", j, h),), lambda V, j=j, h=h, m=m: (_s(V[("mu", j, h)]) - m) ** 2)]))
            terms.append(Term(-(spec.alpha_psi2 + 1), [Factor((("psi2", j, h),), lambda V, j=j, h=h: np.log(_s(V[("psi2", j, h)])))]))
            terms.append(Term(-spec.beta_psi2, [Factor((("psi2", j, h),), lambda V, j=j, h=h: 1.0 / _s(V[("psi2", j, h)]))]))
            if H > 1:
                terms.append(Term(spec.alpha_w - 1, [Factor((("w", j),), lambda V, j=j, h=h: np.log(V[("w", j)][..., h]))]))
        if j > 0:
            terms.append(Term(-0.5 / spec.sigma2_lambda,
                              [Factor((("lam", j),), lambda V, j=j: (_s(V[("lam", j)]) - spec.mu_lambda) ** 2)]))
    terms += _inverse_gamma_prior(("sigma2",), spec.alpha_sigma2, spec.beta_sigma2)
    terms += _beta_prior(("beta",), spec.mu_beta, spec.Sigma_beta)
    return terms


def _inverse_gamma_prior(block, alpha, beta):
    return [Term(-(alpha + 1), [Factor((block,), lambda V: np.log(_s(V[block])))]),
            Term(-beta, [Factor((block,), lambda V: 1.0 / _s(V[block]))])]


def _beta_prior(block, mean, cov):
    prec = np.linalg.inv(cov)

    def quad(V):
        d = V[block] - mean
        return np.einsum("...a,ab,...b->...", d, prec, d)
    return [Term(-0.5, [Factor((block,), quad)])]


def latent_terms(spec, ds) -> list[Term]:
    terms: list[Term] = []
    y, obs, x = ds.y, ds.observed, ds.x
    K = spec.K
    for i in range(ds.n):
        for j in range(ds.m):
            if not obs[i, j]:
                continue
            terms.append(Term(-0.5, [Factor((("psi2", j),), lambda V, j=j: np.log(_s(V[("psi2", j)])))]))
            mean_blocks = (("nu", j), ("eta", i)) + ((("lam", j),) if j > 0 else ())

            def sq(V, i=i, j=j):
                lam = _s(V[("lam", j)]) if j > 0 else 1.0
                r = y[i, j] - _s(V[("nu", j)]) - lam * _s(V[("eta", i)])
                return r * r
            terms.append(Term(-0.5, [Factor((("psi2", j),), lambda V, j=j: 1.0 / _s(V[("psi2", j)])),
                                     Factor(mean_blocks, sq)]))
        for k in range(K):
            a = [Factor((("a", i),), lambda V, i=i, k=k: V[("a", i)][..., k])] if K > 1 else []
            if K > 1:
                terms.append(Term(1.0, a + [Factor((("w",),), lambda V, k=k: np.log(V[("w",)][..., k]))]))
            terms.append(Term(-0.5 * np.log(2 * np.pi), list(a)))
            terms.append(Term(-0.5, a + [Factor((("sigma2", k),), lambda V, k=k: np.log(_s(V[("sigma2", k)])))]))

            def ssq(V, i=i, k=k):
                r = _s(V[("eta", i)]) - V[("beta", k)] @ x[i]
                return r * r
            terms.append(Term(-0.5, a + [Factor((("sigma2", k),), lambda V, k=k: 1.0 / _s(V[("sigma2", k)])),
                                         Factor((("eta", i), ("beta", k)), ssq)]))
    for j in range(ds.m):
        terms.append(Term(-0.5 / spec.sigma2_nu, [Factor((("nu", j),), lambda V, j=j: (_s(V[("nu", j)]) - spec.mu_nu) ** 2)]))
        terms += _inverse_gamma_prior(("psi2", j), spec.alpha_psi2, spec.beta_psi2)
        if j > 0:
            terms.append(Term(-0.5 / spec.sigma2_lambda,
                              [Factor((("lam", j),), lambda V, j=j: (_s(V[("lam", j)]) - spec.mu_lambda) ** 2)]))
    for k in range(K):
        terms += _inverse_gamma_prior(("sigma2", k), spec.alpha_sigma2, spec.beta_sigma2)
        terms += _beta_prior(("beta", k), spec.mu_beta, spec.Sigma_beta)
        if K > 1:
            terms.append(Term(spec.alpha_w - 1, [Factor((("w",),), lambda V, k=k: np.log(V[("w",)][..., k]))]))
    return terms


# ---- rules from fitted states ----------------------------------------------


def outcome_rules(state, spec, ds) -> dict:
    rules = {}
    for j, H in enumerate(spec.H):
        for h in range(H):
            rules[("mu", j, h)] = gaussian_rule(state.mu_q_mu[j, h], state.sigma2_q_mu[j, h])
            rules[("psi2", j, h)] = inverse_gamma_rule(state.alpha_q_psi2[j, h], state.beta_q_psi2[j, h])
        if H > 1:
            rules[("w", j)] = beta2_rule(*state.alpha_q_w[j, :2])
            for i in range(ds.n):
                if ds.observed[i, j]:
                    rules[("a", i, j)] = categorical_rule(state.mu_q_a[i, j, :H])
        if j > 0:
            rules[("lam", j)] = gaussian_rule(state.mu_q_lambda[j], state.sigma2_q_lambda[j])
    for i in range(ds.n):
        rules[("eta", i)] = gaussian_rule(state.mu_q_eta[i], state.sigma2_q_eta[i])
    rules[("beta",)] = mvgaussian_rule(state.mu_q_beta, state.Sigma_q_beta)
    rules[("sigma2",)] = inverse_gamma_rule(state.alpha_q_sigma2, state.beta_q_sigma2)
    return rules


def latent_rules(state, spec, ds) -> dict:
    rules = {}
    for j in range(ds.m):
        rules[("nu", j)] = gaussian_rule(state.mu_q_nu[j], state.sigma2_q_nu[j])
        rules[("psi2", j)] = inverse_gamma_rule(state.alpha_q_psi2[j], state.beta_q_psi2[j])
        if j > 0:
            rules[("lam", j)] = gaussian_rule(state.mu_q_lambda[j], state.sigma2_q_lambda[j])
    for i in range(ds.n):
        rules[("eta", i)] = gaussian_rule(state.mu_q_eta[i], state.sigma2_q_eta[i])
        if spec.K > 1:
            rules[("a", i)] = categorical_rule(state.mu_q_a[i])
    for k in range(spec.K):
        rules[("beta", k)] = mvgaussian_rule(state.mu_q_beta[k], state.Sigma_q_beta[k])
        rules[("sigma2", k)] = inverse_gamma_rule(state.alpha_q_sigma2[k], state.beta_q_sigma2[k])
    if spec.K > 1:
        rules[("w",)] = beta2_rule(*state.alpha_q_w[:2])
    return rules


def log_gamma_density_check(alpha, beta, rule: Rule) -> float:
    """Sanity value: E[1/psi2] under an Inverse-Gamma rule (should be alpha/beta)."""
    return float(rule.weights @ (1.0 / rule.nodes[:, 0]))


__all__ = [name for name in dir() if not name.startswith("__")]
_ = gammaln
