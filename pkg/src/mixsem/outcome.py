"""Outcome-mixture SEM: each outcome is a Gaussian mixture around ``lambda_j * eta_i``.

    y_ij ~ sum_h w_jh N(mu_jh + lambda_j eta_i, psi2_jh),   eta_i ~ N(x_i' beta, sigma2)

The mean-field fit updates one factor at a time in a fixed order.  Every sum
over individuals runs over observed cells only.  Per-(j, h) quantities are
stored in arrays padded to ``max(H)`` columns; padded entries are ignored.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Dataset
from .heuristics import regression_anchor
from .fitting import (
    FitOptions,
    FitReport,
    NumericalError,
    coordinate_ascent,
    softmax_rows,
    spd_inverse,
)
from .kernels import (
    LOG_2PI,
    NaturalGaussianParams,
    digamma,
    dirichlet_log_expectations,
    g_quadratic_rows,
    substream,
)


class SpecError(ValueError):
    """Invalid model structure or hyperparameters."""


def _check_positive(name: str, value) -> None:
    arr = np.asarray(value, dtype=float)
    if not (np.all(np.isfinite(arr)) and np.all(arr > 0)):
        raise SpecError(f"{name} must be finite and strictly positive")


def _check_spd(name: str, mat: np.ndarray) -> None:
    if mat.size == 0:
        return
    if not np.allclose(mat, mat.T, rtol=1e-10, atol=1e-12):
        raise SpecError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise SpecError(f"{name} must be positive definite") from None


def _padded(values, H: Sequence[int], name: str) -> np.ndarray:
    """Accept a scalar, a ragged per-outcome list or an M x max(H) array."""
    M, hmax = len(H), max(H)
    if np.isscalar(values):
        return np.full((M, hmax), float(values))
    rows = list(values)
    if len(rows) != M:
        raise SpecError(f"{name} must have one row per outcome ({M})")
    out = np.zeros((M, hmax))
    for j, row in enumerate(rows):
        row = np.atleast_1d(np.asarray(row, dtype=float))
        if row.shape[0] < H[j]:
            raise SpecError(f"{name} row {j + 1} needs {H[j]} entries")
        out[j, : H[j]] = row[: H[j]]
    return out


@dataclass
class OutcomeMixtureSpec:
    """Component counts per outcome and every prior hyperparameter."""

    H: tuple[int, ...]
    mu_mu: np.ndarray
    sigma2_mu: np.ndarray
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    mu_lambda: float = 1.0
    sigma2_lambda: float = 1.0
    alpha_psi2: float = 1.0
    beta_psi2: float = 1.0
    alpha_sigma2: float = 1.0
    beta_sigma2: float = 1.0
    alpha_w: float = 1.0

    def __post_init__(self):
        H = tuple(int(h) for h in np.atleast_1d(self.H))
        if len(H) == 0 or min(H) < 1:
            raise SpecError("H must list at least one outcome, each with H_j >= 1")
        self.H = H
        self.mu_mu = _padded(self.mu_mu, H, "mu_mu")
        self.sigma2_mu = _padded(self.sigma2_mu, H, "sigma2_mu")
        if not np.all(np.isfinite(self.mu_mu[self.component_mask])):
            raise SpecError("mu_mu must be finite")
        _check_positive("sigma2_mu", self.sigma2_mu[self.component_mask])
        self.mu_beta = np.atleast_1d(np.asarray(self.mu_beta, dtype=float))
        p = self.mu_beta.shape[0]
        self.Sigma_beta = np.asarray(self.Sigma_beta, dtype=float).reshape(p, p)
        _check_spd("Sigma_beta", self.Sigma_beta)
        for name in ("sigma2_lambda", "alpha_psi2", "beta_psi2", "alpha_sigma2", "beta_sigma2", "alpha_w"):
            _check_positive(name, getattr(self, name))
        if not np.isfinite(self.mu_lambda):
            raise SpecError("mu_lambda must be finite")

    @classmethod
    def shared(cls, H, p: int, mu_mu: float = 0.0, sigma2_mu: float = 100.0,
               mu_beta=None, Sigma_beta=None, **hyper) -> "OutcomeMixtureSpec":
        """Same intercept prior for every (j, h); ``Sigma_beta`` defaults to 100 I."""
        mu_beta = np.zeros(p) if mu_beta is None else mu_beta
        Sigma_beta = 100.0 * np.eye(p) if Sigma_beta is None else Sigma_beta
        return cls(H=H, mu_mu=mu_mu, sigma2_mu=sigma2_mu, mu_beta=mu_beta, Sigma_beta=Sigma_beta, **hyper)

    @property
    def m(self) -> int:
        return len(self.H)

    @property
    def p(self) -> int:
        return self.mu_beta.shape[0]

    @property
    def hmax(self) -> int:
        return max(self.H)

    @property
    def component_mask(self) -> np.ndarray:
        return np.arange(max(self.H))[None, :] < np.asarray(self.H)[:, None]

    def exchangeable(self, j: int) -> bool:
        """True when the intercept priors of outcome j do not distinguish its components."""
        h = self.H[j]
        return bool(np.all(self.mu_mu[j, :h] == self.mu_mu[j, 0]) and np.all(self.sigma2_mu[j, :h] == self.sigma2_mu[j, 0]))

    def check_data(self, ds: Dataset) -> None:
        if ds.m != self.m:
            raise SpecError(f"spec has {self.m} outcomes but the data has {ds.m}")
        if ds.p != self.p:
            raise SpecError(f"spec has {self.p} covariates but the data has {ds.p}")

    def to_dict(self) -> dict:
        return {
            "H": list(self.H),
            "mu_mu": [self.mu_mu[j, :h].tolist() for j, h in enumerate(self.H)],
            "sigma2_mu": [self.sigma2_mu[j, :h].tolist() for j, h in enumerate(self.H)],
            "mu_lambda": self.mu_lambda,
            "sigma2_lambda": self.sigma2_lambda,
            "alpha_psi2": self.alpha_psi2,
            "beta_psi2": self.beta_psi2,
            "alpha_sigma2": self.alpha_sigma2,
            "beta_sigma2": self.beta_sigma2,
            "alpha_w": self.alpha_w,
            "mu_beta": self.mu_beta.tolist(),
            "Sigma_beta": self.Sigma_beta.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeMixtureSpec":
        return cls(**d)


_JH_FIELDS = (
    "mu_q_mu", "sigma2_q_mu", "mu_q_mu2",
    "alpha_q_psi2", "beta_q_psi2", "mu_q_inv_psi2", "mu_q_log_psi2",
    "alpha_q_w", "mu_q_log_w",
)
_J_FIELDS = ("mu_q_lambda", "sigma2_q_lambda", "mu_q_lambda2")
_I_FIELDS = ("mu_q_eta", "sigma2_q_eta", "mu_q_eta2")


@dataclass
class OutcomeQState:
    """Variational parameters of the outcome-mixture fit.

    Per-(j, h) arrays are M x max(H); ``mu_q_a`` is N x M x max(H) and is zero
    on unobserved cells and padded components.
    """

    H: tuple[int, ...]
    observed: np.ndarray
    mu_q_mu: np.ndarray
    sigma2_q_mu: np.ndarray
    mu_q_mu2: np.ndarray
    alpha_q_psi2: np.ndarray
    beta_q_psi2: np.ndarray
    mu_q_inv_psi2: np.ndarray
    mu_q_log_psi2: np.ndarray
    alpha_q_w: np.ndarray
    mu_q_log_w: np.ndarray
    mu_q_lambda: np.ndarray
    sigma2_q_lambda: np.ndarray
    mu_q_lambda2: np.ndarray
    mu_q_eta: np.ndarray
    sigma2_q_eta: np.ndarray
    mu_q_eta2: np.ndarray
    mu_q_a: np.ndarray
    mu_q_beta: np.ndarray
    Sigma_q_beta: np.ndarray
    alpha_q_sigma2: float
    beta_q_sigma2: float
    mu_q_inv_sigma2: float
    mu_q_log_sigma2: float = field(default=0.0)

    model = "outcome-mixture"

    @property
    def component_mask(self) -> np.ndarray:
        return np.arange(max(self.H))[None, :] < np.asarray(self.H)[:, None]

    def copy(self) -> "OutcomeQState":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        """Every free scalar variational parameter, for the convergence metric."""
        cm = self.component_mask
        cell = self.observed[:, :, None] & cm[None, :, :]
        parts = [getattr(self, f)[cm] for f in _JH_FIELDS]
        parts += [getattr(self, f)[1:] for f in _J_FIELDS]
        parts += [getattr(self, f) for f in _I_FIELDS]
        parts += [self.mu_q_a[cell], self.mu_q_beta, self.Sigma_q_beta.ravel(),
                  np.array([self.beta_q_sigma2, self.mu_q_inv_sigma2])]
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        H = self.H
        out: dict = {"H": list(H)}
        for f in _JH_FIELDS:
            arr = getattr(self, f)
            out[f] = [arr[j, :h].tolist() for j, h in enumerate(H)]
        for f in _J_FIELDS + _I_FIELDS:
            out[f] = getattr(self, f).tolist()
        out["mu_q_a"] = [
            [self.mu_q_a[i, j, :h].tolist() if self.observed[i, j] else None for j, h in enumerate(H)]
            for i in range(self.observed.shape[0])
        ]
        out["mu_q_beta"] = self.mu_q_beta.tolist()
        out["Sigma_q_beta"] = self.Sigma_q_beta.tolist()
        for f in ("alpha_q_sigma2", "beta_q_sigma2", "mu_q_inv_sigma2", "mu_q_log_sigma2"):
            out[f] = float(getattr(self, f))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "OutcomeQState":
        H = tuple(int(h) for h in d["H"])
        M, hmax = len(H), max(H)
        kw: dict = {"H": H}
        for f in _JH_FIELDS:
            kw[f] = _padded(d[f], H, f)
        for f in _J_FIELDS + _I_FIELDS:
            kw[f] = np.asarray(d[f], dtype=float)
        N = kw["mu_q_eta"].shape[0]
        a = np.zeros((N, M, hmax))
        observed = np.zeros((N, M), dtype=bool)
        for i, row in enumerate(d["mu_q_a"]):
            for j, cell in enumerate(row):
                if cell is not None:
                    observed[i, j] = True
                    a[i, j, : H[j]] = cell
        kw["observed"] = observed
        kw["mu_q_a"] = a
        kw["mu_q_beta"] = np.asarray(d["mu_q_beta"], dtype=float).reshape(-1)
        p = kw["mu_q_beta"].shape[0]
        kw["Sigma_q_beta"] = np.asarray(d["Sigma_q_beta"], dtype=float).reshape(p, p)
        for f in ("alpha_q_sigma2", "beta_q_sigma2", "mu_q_inv_sigma2", "mu_q_log_sigma2"):
            kw[f] = float(d[f])
        return cls(**kw)


@dataclass
class InitOptions:
    """Overrides for the default starting point.

    ``strategy="spread"`` starts latent means at 0, loadings at 1 and spreads
    intercepts over +-1 sd of each outcome.  ``strategy="regression"`` anchors
    the start on an OLS fit of the first outcome on the covariates: beta,
    sigma2, latent means and loadings then start near their data-implied
    values and intercepts are spread around the remaining residual.
    ``warm_start`` copies a previous state wholesale.  ``mu_q_mu`` (ragged or
    padded) and ``mu_q_eta`` replace the starting intercept and latent means.
    ``jitter`` adds seeded noise, in units of the outcome sd, to the starting
    intercepts.
    """

    strategy: str = "spread"
    warm_start: object | None = None
    mu_q_mu: object | None = None
    mu_q_eta: np.ndarray | None = None
    jitter: float = 0.0


def init_state(spec: OutcomeMixtureSpec, ds: Dataset, init: InitOptions | None = None,
               rng: np.random.Generator | None = None) -> OutcomeQState:
    """Starting state; deterministic given ``rng``."""
    spec.check_data(ds)
    init = init or InitOptions()
    if init.warm_start is not None:
        state = init.warm_start.copy()
        if state.H != spec.H or not np.array_equal(state.observed, ds.observed):
            raise SpecError("warm-start state does not match the model structure or data")
        return state
    if init.strategy not in ("spread", "regression"):
        raise SpecError(f"unknown init strategy {init.strategy!r}")
    rng = rng if rng is not None else substream(0)
    N, M, p, hmax = ds.n, ds.m, ds.p, spec.hmax
    cm = spec.component_mask
    H = np.asarray(spec.H)
    n_obs = ds.n_observed()

    lam = np.ones(M)
    eta = np.zeros(N)
    s2_eta = np.ones(N)
    beta = np.zeros(p)
    inv_sigma2 = 1.0
    if init.strategy == "regression":
        anchor = regression_anchor(ds)
        lam, eta, beta = anchor.lam.copy(), anchor.eta.copy(), anchor.beta.copy()
        inv_sigma2 = 1.0 / anchor.sigma2
        s2_eta = np.full(N, anchor.sigma2)
    if init.mu_q_eta is not None:
        eta = np.asarray(init.mu_q_eta, dtype=float).copy()
        if eta.shape != (N,):
            raise SpecError(f"init mu_q_eta must have length {N}")

    # intercepts are spread over the part of each outcome the start does not explain
    means = np.empty(M)
    var = np.empty(M)
    for j in range(M):
        o = ds.observed[:, j]
        r = ds.y[o, j] - lam[j] * eta[o]
        means[j] = r.mean()
        var[j] = r.var() if r.size > 1 and r.var() > 0 else 1.0
    sd = np.sqrt(var)
    mu = np.zeros((M, hmax))
    for j, h in enumerate(spec.H):
        spread = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
        mu[j, :h] = means[j] + sd[j] * spread
    if init.mu_q_mu is not None:
        mu = _padded(init.mu_q_mu, spec.H, "init mu_q_mu")
    if init.jitter > 0:
        mu = mu + init.jitter * sd[:, None] * rng.standard_normal((M, hmax))
    mu = np.where(cm, mu, 0.0)
    s2_mu = np.where(cm, (var / np.maximum(n_obs, 1))[:, None], 0.0)

    inv_psi = np.where(cm, (1.0 / var)[:, None], 0.0)
    log_psi = np.where(cm, np.log(var)[:, None], 0.0)
    alpha_psi = np.where(cm, spec.alpha_psi2 + 0.5 * (n_obs / H)[:, None], 0.0)
    beta_psi = np.where(cm, alpha_psi * var[:, None], 0.0)
    alpha_w = np.where(cm, spec.alpha_w + (n_obs / H)[:, None], 0.0)
    log_w = np.where(cm, np.log(1.0 / H)[:, None], 0.0)

    s2_lam = np.ones(M)
    lam[0] = 1.0
    s2_lam[0] = 0.0

    a = np.zeros((N, M, hmax))
    a[:] = np.where(cm, 1.0 / H[:, None], 0.0)[None]
    a *= ds.observed[:, :, None]

    alpha_sig = 0.5 * (N + 2.0 * spec.alpha_sigma2)
    beta_sig = alpha_sig / inv_sigma2
    return OutcomeQState(
        H=spec.H, observed=ds.observed.copy(),
        mu_q_mu=mu, sigma2_q_mu=s2_mu, mu_q_mu2=mu**2 + s2_mu,
        alpha_q_psi2=alpha_psi, beta_q_psi2=beta_psi, mu_q_inv_psi2=inv_psi, mu_q_log_psi2=log_psi,
        alpha_q_w=alpha_w, mu_q_log_w=log_w,
        mu_q_lambda=lam, sigma2_q_lambda=s2_lam, mu_q_lambda2=lam**2 + s2_lam,
        mu_q_eta=eta, sigma2_q_eta=s2_eta, mu_q_eta2=eta**2 + s2_eta,
        mu_q_a=a,
        mu_q_beta=beta, Sigma_q_beta=spec.Sigma_beta.copy(),
        alpha_q_sigma2=alpha_sig, beta_q_sigma2=beta_sig, mu_q_inv_sigma2=inv_sigma2,
        mu_q_log_sigma2=float(np.log(beta_sig) - digamma(alpha_sig)),
    )


def expected_sq_residual(y, mu, mu2, lam, lam2, eta, eta2):
    """E_q (y - mu - lam * eta)^2 under independent factors."""
    resid = y - mu - lam * eta
    return resid * resid + (mu2 - mu * mu) + (lam2 * eta2 - lam * lam * eta * eta)


def _column(state: OutcomeQState, ds: Dataset, j: int):
    obs = ds.observed[:, j]
    return obs, ds.y[obs, j], state.mu_q_eta[obs], state.mu_q_eta2[obs]


def update_responsibilities(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset, j: int) -> OutcomeQState:
    """Softmax over components of the expected log complete-data density, per observed cell."""
    h = spec.H[j]
    obs, y, eta, eta2 = _column(state, ds, j)
    if h == 1:
        state.mu_q_a[obs, j, 0] = 1.0
        return state
    esq = expected_sq_residual(
        y[:, None], state.mu_q_mu[j, :h], state.mu_q_mu2[j, :h],
        state.mu_q_lambda[j], state.mu_q_lambda2[j], eta[:, None], eta2[:, None],
    )
    tau = (state.mu_q_log_w[j, :h] - 0.5 * state.mu_q_log_psi2[j, :h] - 0.5 * LOG_2PI
           - 0.5 * state.mu_q_inv_psi2[j, :h] * esq)
    state.mu_q_a[obs, j, :h] = softmax_rows(tau)
    return state


def update_loadings(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset, j: int) -> OutcomeQState:
    if j == 0:
        raise ValueError("the first loading is fixed at 1 and cannot be updated")
    h = spec.H[j]
    obs, y, eta, eta2 = _column(state, ds, j)
    w = state.mu_q_a[obs, j, :h] * state.mu_q_inv_psi2[j, :h]
    prec = np.sum(w * eta2[:, None]) + 1.0 / spec.sigma2_lambda
    lin = np.sum(w * eta[:, None] * (y[:, None] - state.mu_q_mu[j, :h])) + spec.mu_lambda / spec.sigma2_lambda
    var = 1.0 / prec
    state.sigma2_q_lambda[j] = var
    state.mu_q_lambda[j] = var * lin
    state.mu_q_lambda2[j] = var + state.mu_q_lambda[j] ** 2
    return state


def update_intercepts(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset, j: int) -> OutcomeQState:
    h = spec.H[j]
    obs, y, eta, _ = _column(state, ds, j)
    a = state.mu_q_a[obs, j, :h]
    inv_psi = state.mu_q_inv_psi2[j, :h]
    prior_prec = 1.0 / spec.sigma2_mu[j, :h]
    prec = a.sum(axis=0) * inv_psi + prior_prec
    resid = (y - state.mu_q_lambda[j] * eta)[:, None]
    lin = inv_psi * np.sum(a * resid, axis=0) + spec.mu_mu[j, :h] * prior_prec
    var = 1.0 / prec
    state.sigma2_q_mu[j, :h] = var
    state.mu_q_mu[j, :h] = var * lin
    state.mu_q_mu2[j, :h] = var + state.mu_q_mu[j, :h] ** 2
    return state


def update_noise_and_weights(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset, j: int) -> OutcomeQState:
    h = spec.H[j]
    obs, y, eta, eta2 = _column(state, ds, j)
    a = state.mu_q_a[obs, j, :h]
    esq = expected_sq_residual(
        y[:, None], state.mu_q_mu[j, :h], state.mu_q_mu2[j, :h],
        state.mu_q_lambda[j], state.mu_q_lambda2[j], eta[:, None], eta2[:, None],
    )
    alpha = 0.5 * a.sum(axis=0) + spec.alpha_psi2
    beta = spec.beta_psi2 + 0.5 * np.sum(a * esq, axis=0)
    state.alpha_q_psi2[j, :h] = alpha
    state.beta_q_psi2[j, :h] = beta
    state.mu_q_inv_psi2[j, :h] = alpha / beta
    state.mu_q_log_psi2[j, :h] = np.log(beta) - digamma(alpha)
    if h > 1:
        aw = a.sum(axis=0) + spec.alpha_w
        state.alpha_q_w[j, :h] = aw
        state.mu_q_log_w[j, :h] = dirichlet_log_expectations(aw)
    return state


def update_latents(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset) -> OutcomeQState:
    # padded components and unobserved cells carry zero responsibility, so they drop out
    w = state.mu_q_a * state.mu_q_inv_psi2[None, :, :]
    prec = np.einsum("ijh,j->i", w, state.mu_q_lambda2) + state.mu_q_inv_sigma2
    resid = ds.y_filled[:, :, None] - state.mu_q_mu[None, :, :]
    lin = np.einsum("ijh,j->i", w * resid, state.mu_q_lambda)
    lin = lin + state.mu_q_inv_sigma2 * (ds.x @ state.mu_q_beta)
    var = 1.0 / prec
    state.sigma2_q_eta = var
    state.mu_q_eta = var * lin
    state.mu_q_eta2 = var + state.mu_q_eta**2
    return state


def beta_natural_params(mean: np.ndarray, prec: np.ndarray) -> NaturalGaussianParams:
    return NaturalGaussianParams(v1=prec @ mean, v2=(-0.5 * prec).reshape(-1, order="F"))


def update_beta(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset) -> OutcomeQState:
    X = ds.x
    prior_prec = spd_inverse(spec.Sigma_beta, "prior beta")
    prec = state.mu_q_inv_sigma2 * (X.T @ X) + prior_prec
    cov = spd_inverse(prec, "q(beta)")
    state.Sigma_q_beta = cov
    state.mu_q_beta = cov @ (state.mu_q_inv_sigma2 * (X.T @ state.mu_q_eta) + prior_prec @ spec.mu_beta)
    return state


def structural_g(state, mean: np.ndarray, cov: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Per-individual G(q(beta); x x', E[eta] x, E[eta^2])."""
    if mean.shape[0] == 0:
        return -0.5 * state.mu_q_eta2
    nat = beta_natural_params(mean, spd_inverse(cov, "q(beta)"))
    return g_quadratic_rows(nat, X, state.mu_q_eta, state.mu_q_eta2)


def update_sigma2(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset) -> OutcomeQState:
    g = structural_g(state, state.mu_q_beta, state.Sigma_q_beta, ds.x)
    beta = spec.beta_sigma2 - float(np.sum(g))
    if not beta > 0:
        raise NumericalError("q(sigma2) rate is not positive")
    state.alpha_q_sigma2 = 0.5 * (ds.n + 2.0 * spec.alpha_sigma2)
    state.beta_q_sigma2 = beta
    state.mu_q_inv_sigma2 = state.alpha_q_sigma2 / beta
    state.mu_q_log_sigma2 = float(np.log(beta) - digamma(state.alpha_q_sigma2))
    return state


def update_regression(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset) -> OutcomeQState:
    update_beta(state, spec, ds)
    return update_sigma2(state, spec, ds)


def sweep(state: OutcomeQState, spec: OutcomeMixtureSpec, ds: Dataset) -> OutcomeQState:
    """One full cycle: per outcome (responsibilities, loading, intercepts, noise and
    weights), then latent factors, then the regression block."""
    state = state.copy()
    for j in range(spec.m):
        update_responsibilities(state, spec, ds, j)
        if j > 0:
            update_loadings(state, spec, ds, j)
        update_intercepts(state, spec, ds, j)
        update_noise_and_weights(state, spec, ds, j)
    update_latents(state, spec, ds)
    update_regression(state, spec, ds)
    return state


def sort_components(state: OutcomeQState, spec: OutcomeMixtureSpec) -> OutcomeQState:
    """Order components of each outcome by ascending intercept mean.

    Outcomes whose intercept priors tell components apart keep their order,
    since the labels then carry meaning.
    """
    state = state.copy()
    for j, h in enumerate(spec.H):
        if h == 1 or not spec.exchangeable(j):
            continue
        order = np.argsort(state.mu_q_mu[j, :h], kind="stable")
        for f in _JH_FIELDS:
            arr = getattr(state, f)
            arr[j, :h] = arr[j, order]
        state.mu_q_a[:, j, :h] = state.mu_q_a[:, j, order]
    return state


def fit(spec: OutcomeMixtureSpec, ds: Dataset, options: FitOptions | None = None) -> tuple[OutcomeQState, FitReport]:
    """Run coordinate ascent to convergence; components are sorted on return."""
    options = options or FitOptions()
    state = init_state(spec, ds, options.init, substream(options.seed))
    state, report = coordinate_ascent(
        state, lambda s: sweep(s, spec, ds), OutcomeQState.flat, options.tol, options.max_iter
    )
    return sort_components(state, spec), report


def fit_to_json(spec: OutcomeMixtureSpec, state: OutcomeQState, report: FitReport | None = None) -> str:
    doc = {"model": OutcomeQState.model, "spec": spec.to_dict(), "state": state.to_dict()}
    if report is not None:
        doc["report"] = report.to_dict()
    return json.dumps(doc, indent=1)
