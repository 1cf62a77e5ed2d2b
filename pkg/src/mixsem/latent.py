"""Latent-mixture SEM: Gaussian outcomes, K-component mixture of regressions on the latent factor.

    y_ij ~ N(nu_j + lambda_j eta_i, psi2_j),   eta_i ~ sum_k w_k N(x_i' beta_k, sigma2_k)

Fitted by the same kind of coordinate ascent as the outcome-mixture model.
Order of one sweep: per-component regression blocks and weights, then per
individual responsibilities and latent factor, then per-outcome loading,
intercept and noise.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .fitting import FitOptions, FitReport, NumericalError, coordinate_ascent, softmax_rows, spd_inverse
from .heuristics import InsufficientDataError, SingularDesignError, mixreg_em, mixreg_responsibilities, regression_anchor
from .kernels import LOG_2PI, digamma, dirichlet_log_expectations, g_quadratic_rows, substream
from .outcome import SpecError, _check_positive, _check_spd, beta_natural_params, expected_sq_residual


@dataclass
class LatentMixtureSpec:
    """Number of latent components and every prior hyperparameter.

    ``pin_nu1`` optionally fixes the first intercept at a constant, a second
    identifiability constraint on top of the unit first loading.
    """

    K: int
    mu_beta: np.ndarray
    Sigma_beta: np.ndarray
    mu_nu: float = 0.0
    sigma2_nu: float = 100.0
    mu_lambda: float = 1.0
    sigma2_lambda: float = 1.0
    alpha_psi2: float = 1.0
    beta_psi2: float = 1.0
    alpha_sigma2: float = 1.0
    beta_sigma2: float = 1.0
    alpha_w: float = 1.0
    pin_nu1: float | None = None

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise SpecError("K must be a positive integer")
        self.K = int(self.K)
        self.mu_beta = np.atleast_1d(np.asarray(self.mu_beta, dtype=float))
        p = self.mu_beta.shape[0]
        self.Sigma_beta = np.asarray(self.Sigma_beta, dtype=float).reshape(p, p)
        _check_spd("Sigma_beta", self.Sigma_beta)
        for name in ("sigma2_nu", "sigma2_lambda", "alpha_psi2", "beta_psi2", "alpha_sigma2", "beta_sigma2", "alpha_w"):
            _check_positive(name, getattr(self, name))
        for name in ("mu_nu", "mu_lambda"):
            if not np.isfinite(getattr(self, name)):
                raise SpecError(f"{name} must be finite")

    @property
    def p(self) -> int:
        return self.mu_beta.shape[0]

    def check_data(self, ds: Dataset) -> None:
        if ds.p != self.p:
            raise SpecError(f"spec has {self.p} covariates but the data has {ds.p}")

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "mu_nu": self.mu_nu,
            "sigma2_nu": self.sigma2_nu,
            "mu_lambda": self.mu_lambda,
            "sigma2_lambda": self.sigma2_lambda,
            "alpha_psi2": self.alpha_psi2,
            "beta_psi2": self.beta_psi2,
            "alpha_sigma2": self.alpha_sigma2,
            "beta_sigma2": self.beta_sigma2,
            "alpha_w": self.alpha_w,
            "mu_beta": self.mu_beta.tolist(),
            "Sigma_beta": self.Sigma_beta.tolist(),
            "pin_nu1": self.pin_nu1,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentMixtureSpec":
        return cls(**d)


_J_FIELDS = (
    "mu_q_nu", "sigma2_q_nu", "mu_q_nu2",
    "alpha_q_psi2", "beta_q_psi2", "mu_q_inv_psi2", "mu_q_log_psi2",
    "mu_q_lambda", "sigma2_q_lambda", "mu_q_lambda2",
)
_I_FIELDS = ("mu_q_eta", "sigma2_q_eta", "mu_q_eta2")
_K_FIELDS = (
    "mu_q_beta", "Sigma_q_beta",
    "alpha_q_sigma2", "beta_q_sigma2", "mu_q_inv_sigma2", "mu_q_log_sigma2",
    "alpha_q_w", "mu_q_log_w",
)


@dataclass
class LatentQState:
    """Variational parameters of the latent-mixture fit (``mu_q_a`` is N x K)."""

    mu_q_nu: np.ndarray
    sigma2_q_nu: np.ndarray
    mu_q_nu2: np.ndarray
    alpha_q_psi2: np.ndarray
    beta_q_psi2: np.ndarray
    mu_q_inv_psi2: np.ndarray
    mu_q_log_psi2: np.ndarray
    mu_q_lambda: np.ndarray
    sigma2_q_lambda: np.ndarray
    mu_q_lambda2: np.ndarray
    mu_q_eta: np.ndarray
    sigma2_q_eta: np.ndarray
    mu_q_eta2: np.ndarray
    mu_q_a: np.ndarray
    mu_q_beta: np.ndarray
    Sigma_q_beta: np.ndarray
    alpha_q_sigma2: np.ndarray
    beta_q_sigma2: np.ndarray
    mu_q_inv_sigma2: np.ndarray
    mu_q_log_sigma2: np.ndarray
    alpha_q_w: np.ndarray
    mu_q_log_w: np.ndarray
    observed: np.ndarray = field(repr=False, default=None)

    model = "latent-mixture"

    @property
    def K(self) -> int:
        return self.mu_q_a.shape[1]

    def copy(self) -> "LatentQState":
        return copy.deepcopy(self)

    def flat(self) -> np.ndarray:
        parts = [getattr(self, f) for f in _J_FIELDS if not f.endswith("lambda") and not f.endswith("lambda2")]
        parts += [self.mu_q_lambda[1:], self.sigma2_q_lambda[1:], self.mu_q_lambda2[1:]]
        parts += [getattr(self, f) for f in _I_FIELDS]
        parts += [self.mu_q_a.ravel()]
        parts += [np.ravel(getattr(self, f)) for f in _K_FIELDS]
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        out: dict = {"K": self.K}
        for f in _J_FIELDS + _I_FIELDS:
            out[f] = getattr(self, f).tolist()
        out["mu_q_a"] = self.mu_q_a.tolist()
        for f in _K_FIELDS:
            out[f] = getattr(self, f).tolist()
        out["observed"] = self.observed.astype(int).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LatentQState":
        kw = {f: np.asarray(d[f], dtype=float) for f in _J_FIELDS + _I_FIELDS + _K_FIELDS}
        K = int(d["K"])
        kw["mu_q_a"] = np.asarray(d["mu_q_a"], dtype=float).reshape(-1, K)
        p = kw["mu_q_beta"].size // K
        kw["mu_q_beta"] = kw["mu_q_beta"].reshape(K, p)
        kw["Sigma_q_beta"] = kw["Sigma_q_beta"].reshape(K, p, p)
        kw["observed"] = np.asarray(d["observed"], dtype=bool)
        return cls(**kw)


@dataclass
class LatentInitOptions:
    """Starting point for the latent-mixture fit.

    ``strategy="mixreg"`` fits a K-component mixture of regressions of the
    first outcome on the covariates and starts the component blocks, weights
    and responsibilities from it.  ``strategy="anchor"`` starts every
    component at the single-regression anchor with slopes scaled apart.
    ``beta``, ``sigma2`` and ``w`` override the component starts (K rows).
    """

    strategy: str = "mixreg"
    warm_start: object | None = None
    beta: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    w: np.ndarray | None = None
    restarts: int = 10


def init_latent_state(spec: LatentMixtureSpec, ds: Dataset, init: LatentInitOptions | None = None,
                      rng: np.random.Generator | None = None) -> LatentQState:
    spec.check_data(ds)
    init = init or LatentInitOptions()
    if init.warm_start is not None:
        state = init.warm_start.copy()
        if state.K != spec.K or not np.array_equal(state.observed, ds.observed):
            raise SpecError("warm-start state does not match the model structure or data")
        return state
    if init.strategy not in ("mixreg", "anchor"):
        raise SpecError(f"unknown init strategy {init.strategy!r}")
    rng = rng if rng is not None else substream(0)
    N, M, p, K = ds.n, ds.m, ds.p, spec.K
    anchor = regression_anchor(ds)

    betas = np.tile(anchor.beta, (K, 1))
    if K > 1:
        betas = betas * (1.0 + 0.5 * np.linspace(-1.0, 1.0, K))[:, None]
    sig2 = np.full(K, anchor.sigma2)
    w = np.full(K, 1.0 / K)
    a = np.full((N, K), 1.0 / K)
    if init.strategy == "mixreg" and K > 1 and p > 0:
        obs = ds.observed[:, 0]
        try:
            res = mixreg_em(ds.y[obs, 0], ds.x[obs], K, restarts=init.restarts, rng=rng)
        except (InsufficientDataError, SingularDesignError):
            res = None
        if res is not None:
            betas = res.coefficients.copy()
            sig2 = np.maximum(0.5 * res.variances, 1e-8)
            w = res.weights.copy()
            a[obs] = mixreg_responsibilities(res, ds.y[obs, 0], ds.x[obs])
    if init.beta is not None:
        betas = np.asarray(init.beta, dtype=float).reshape(K, p)
    if init.sigma2 is not None:
        sig2 = np.asarray(init.sigma2, dtype=float).reshape(K)
    if init.w is not None:
        w = np.asarray(init.w, dtype=float).reshape(K)

    eta = np.einsum("ik,ik->i", a, ds.x @ betas.T) if p > 0 else anchor.eta.copy()
    s2_eta = np.full(N, float(a[0] @ sig2) if N else 1.0)
    lam = anchor.lam.copy()
    nu = np.empty(M)
    var = np.empty(M)
    for j in range(M):
        o = ds.observed[:, j]
        r = ds.y[o, j] - lam[j] * eta[o]
        nu[j] = r.mean()
        var[j] = r.var() if r.size > 1 and r.var() > 0 else 1.0
    s2_nu = var / np.maximum(ds.n_observed(), 1)
    if spec.pin_nu1 is not None:
        nu[0], s2_nu[0] = spec.pin_nu1, 0.0
    s2_lam = np.ones(M)
    lam[0], s2_lam[0] = 1.0, 0.0

    alpha_psi = 0.5 * ds.n_observed() + spec.alpha_psi2
    beta_psi = alpha_psi * var
    alpha_sig = 0.5 * N * w + spec.alpha_sigma2
    beta_sig = alpha_sig * sig2
    alpha_w = spec.alpha_w + N * w
    return LatentQState(
        mu_q_nu=nu, sigma2_q_nu=s2_nu, mu_q_nu2=nu**2 + s2_nu,
        alpha_q_psi2=alpha_psi, beta_q_psi2=beta_psi, mu_q_inv_psi2=1.0 / var,
        mu_q_log_psi2=np.log(beta_psi) - digamma(alpha_psi),
        mu_q_lambda=lam, sigma2_q_lambda=s2_lam, mu_q_lambda2=lam**2 + s2_lam,
        mu_q_eta=eta, sigma2_q_eta=s2_eta, mu_q_eta2=eta**2 + s2_eta,
        mu_q_a=a,
        mu_q_beta=betas, Sigma_q_beta=np.tile(spec.Sigma_beta, (K, 1, 1)),
        alpha_q_sigma2=alpha_sig, beta_q_sigma2=beta_sig, mu_q_inv_sigma2=1.0 / sig2,
        mu_q_log_sigma2=np.log(beta_sig) - digamma(alpha_sig),
        alpha_q_w=alpha_w, mu_q_log_w=np.log(w),
        observed=ds.observed.copy(),
    )


def component_g(state: LatentQState, ds: Dataset, k: int) -> np.ndarray:
    """Per-individual G(q(beta_k); x x', E[eta] x, E[eta^2])."""
    if ds.p == 0:
        return -0.5 * state.mu_q_eta2
    prec = spd_inverse(state.Sigma_q_beta[k], "q(beta_k)")
    nat = beta_natural_params(state.mu_q_beta[k], prec)
    return g_quadratic_rows(nat, ds.x, state.mu_q_eta, state.mu_q_eta2)


def update_component_beta(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset, k: int) -> LatentQState:
    a = state.mu_q_a[:, k]
    X = ds.x
    prior_prec = spd_inverse(spec.Sigma_beta, "prior beta")
    inv_s = state.mu_q_inv_sigma2[k]
    prec = inv_s * (X.T * a) @ X + prior_prec
    cov = spd_inverse(prec, "q(beta_k)")
    state.Sigma_q_beta[k] = cov
    state.mu_q_beta[k] = cov @ (inv_s * (X.T @ (a * state.mu_q_eta)) + prior_prec @ spec.mu_beta)
    return state


def update_component_sigma2(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset, k: int) -> LatentQState:
    a = state.mu_q_a[:, k]
    g = component_g(state, ds, k)
    alpha = 0.5 * a.sum() + spec.alpha_sigma2
    beta = spec.beta_sigma2 - float(a @ g)
    if not beta > 0:
        raise NumericalError(f"q(sigma2_{k + 1}) rate is not positive")
    state.alpha_q_sigma2[k] = alpha
    state.beta_q_sigma2[k] = beta
    state.mu_q_log_sigma2[k] = np.log(beta) - digamma(alpha)
    state.mu_q_inv_sigma2[k] = alpha / beta
    return state


def update_component_count(state: LatentQState, spec: LatentMixtureSpec, k: int) -> LatentQState:
    if spec.K > 1:
        state.alpha_q_w[k] = state.mu_q_a[:, k].sum() + spec.alpha_w
    return state


def update_component(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset, k: int) -> LatentQState:
    """Regression coefficients, structural variance and Dirichlet count of component k."""
    update_component_beta(state, spec, ds, k)
    update_component_sigma2(state, spec, ds, k)
    return update_component_count(state, spec, k)


def update_weights(state: LatentQState, spec: LatentMixtureSpec) -> LatentQState:
    state.mu_q_log_w = dirichlet_log_expectations(state.alpha_q_w)
    return state


def latent_log_weights(state: LatentQState, ds: Dataset) -> np.ndarray:
    """Unnormalized log responsibilities tau (N x K) at the current moments."""
    tau = np.empty((ds.n, state.K))
    for k in range(state.K):
        tau[:, k] = (state.mu_q_log_w[k] - 0.5 * state.mu_q_log_sigma2[k] - 0.5 * LOG_2PI
                     + state.mu_q_inv_sigma2[k] * component_g(state, ds, k))
    return tau


def latent_responsibilities(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    if state.K == 1:
        state.mu_q_a = np.ones((ds.n, 1))
        return state
    state.mu_q_a = softmax_rows(latent_log_weights(state, ds))
    return state


def update_latents(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    obs = ds.observed
    w = obs * state.mu_q_inv_psi2[None, :]
    prec = w @ state.mu_q_lambda2 + state.mu_q_a @ state.mu_q_inv_sigma2
    resid = ds.y_filled - state.mu_q_nu[None, :]
    lin = (w * resid) @ state.mu_q_lambda
    if ds.p > 0:
        lin = lin + np.einsum("ik,k,ik->i", state.mu_q_a, state.mu_q_inv_sigma2, ds.x @ state.mu_q_beta.T)
    var = 1.0 / prec
    state.sigma2_q_eta = var
    state.mu_q_eta = var * lin
    state.mu_q_eta2 = var + state.mu_q_eta**2
    return state


def update_latent_loadings(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    """Loadings of outcomes 2..M; outcomes are independent given the latent moments."""
    obs = ds.observed
    eta = state.mu_q_eta
    inv_psi = state.mu_q_inv_psi2
    prec = inv_psi * (obs.T @ state.mu_q_eta2) + 1.0 / spec.sigma2_lambda
    lin = inv_psi * (((ds.y_filled - state.mu_q_nu) * obs).T @ eta) + spec.mu_lambda / spec.sigma2_lambda
    var = 1.0 / prec
    state.sigma2_q_lambda[1:] = var[1:]
    state.mu_q_lambda[1:] = (var * lin)[1:]
    state.mu_q_lambda2[1:] = state.sigma2_q_lambda[1:] + state.mu_q_lambda[1:] ** 2
    return state


def update_latent_intercepts(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    obs = ds.observed
    inv_psi = state.mu_q_inv_psi2
    prec = obs.sum(axis=0) * inv_psi + 1.0 / spec.sigma2_nu
    resid = ds.y_filled - np.outer(state.mu_q_eta, state.mu_q_lambda)
    lin = inv_psi * (resid * obs).sum(axis=0) + spec.mu_nu / spec.sigma2_nu
    var = 1.0 / prec
    free = np.ones(ds.m, dtype=bool)
    if spec.pin_nu1 is not None:
        free[0] = False
    state.sigma2_q_nu[free] = var[free]
    state.mu_q_nu[free] = (var * lin)[free]
    state.mu_q_nu2 = state.sigma2_q_nu + state.mu_q_nu**2
    return state


def update_latent_noise(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    obs = ds.observed
    esq = expected_sq_residual(
        ds.y_filled, state.mu_q_nu, state.mu_q_nu2, state.mu_q_lambda, state.mu_q_lambda2,
        state.mu_q_eta[:, None], state.mu_q_eta2[:, None],
    )
    alpha = 0.5 * obs.sum(axis=0) + spec.alpha_psi2
    beta = spec.beta_psi2 + 0.5 * (esq * obs).sum(axis=0)
    state.alpha_q_psi2 = alpha
    state.beta_q_psi2 = beta
    state.mu_q_inv_psi2 = alpha / beta
    state.mu_q_log_psi2 = np.log(beta) - digamma(alpha)
    return state


def update_measurement(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    """Loadings (j >= 2), then intercepts, then noise precisions of every outcome."""
    update_latent_loadings(state, spec, ds)
    update_latent_intercepts(state, spec, ds)
    return update_latent_noise(state, spec, ds)


def sweep_latent(state: LatentQState, spec: LatentMixtureSpec, ds: Dataset) -> LatentQState:
    state = state.copy()
    for k in range(spec.K):
        update_component(state, spec, ds, k)
    update_weights(state, spec)
    latent_responsibilities(state, spec, ds)
    update_latents(state, spec, ds)
    update_measurement(state, spec, ds)
    return state


def sort_latent_components(state: LatentQState, xbar: np.ndarray) -> LatentQState:
    """Order components by ascending mean structural prediction ``xbar' beta_k``."""
    if state.K == 1 or xbar.shape[0] == 0:
        return state.copy()
    order = np.argsort(state.mu_q_beta @ xbar, kind="stable")
    state = state.copy()
    for f in _K_FIELDS:
        setattr(state, f, getattr(state, f)[order].copy())
    state.mu_q_a = state.mu_q_a[:, order].copy()
    return state


def fit_latent(spec: LatentMixtureSpec, ds: Dataset, options: FitOptions | None = None) -> tuple[LatentQState, FitReport]:
    options = options or FitOptions()
    state = init_latent_state(spec, ds, options.init, substream(options.seed))
    state, report = coordinate_ascent(
        state, lambda s: sweep_latent(s, spec, ds), LatentQState.flat, options.tol, options.max_iter
    )
    return sort_latent_components(state, ds.x.mean(axis=0)), report


def latent_fit_to_json(spec: LatentMixtureSpec, state: LatentQState, report: FitReport | None = None) -> str:
    doc = {"model": LatentQState.model, "spec": spec.to_dict(), "state": state.to_dict()}
    if report is not None:
        doc["report"] = report.to_dict()
    return json.dumps(doc, indent=1)
