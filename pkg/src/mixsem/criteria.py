"""Variational WAIC and AIC-style criteria from Monte-Carlo draws of a fitted q.

Works on either fitted state.  Each draw holds every q-block; mixture
indicators are not drawn, since the likelihood sums them out exactly.  The
pointwise unit is the individual: the log density of all of one person's
observed outcomes given the drawn parameters and that person's drawn latent
factor.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import Dataset
from .kernels import LOG_2PI, draw_dirichlet, draw_inverse_gamma, draw_mvnormal, draw_normal, substream

DEFAULT_DRAWS = 10_000
_CHUNK = 256


class CriteriaError(ValueError):
    pass


@dataclass
class ThetaDraw:
    """A batch of parameter draws; every array has a leading draw axis.

    The measurement part is stored in the outcome-mixture layout for both
    models (the latent-mixture model has one component per outcome), which
    is all the likelihood needs.  Structural blocks are kept for reporting.
    """

    intercepts: np.ndarray  # R x M x Hmax
    lam: np.ndarray  # R x M
    psi2: np.ndarray  # R x M x Hmax
    weights: np.ndarray  # R x M x Hmax, zero on padding
    eta: np.ndarray  # R x N
    beta: np.ndarray  # R x p (outcome) or R x K x p (latent)
    sigma2: np.ndarray  # R or R x K
    mixing_w: np.ndarray | None = None  # R x K for the latent model

    @property
    def n_draws(self) -> int:
        return self.lam.shape[0]


def _mask(state) -> np.ndarray:
    if state.model == "outcome-mixture":
        return state.component_mask
    return np.ones((state.mu_q_lambda.shape[0], 1), dtype=bool)


def sample_theta(state, rng: np.random.Generator, n_draws: int = 1) -> ThetaDraw:
    """Independent draws of every q-block, in a fixed block order."""
    R = int(n_draws)
    if R < 1:
        raise ValueError("n_draws must be at least 1")
    lam = draw_normal(state.mu_q_lambda, state.sigma2_q_lambda, rng, size=(R,) + state.mu_q_lambda.shape)
    lam[:, 0] = 1.0
    if state.model == "outcome-mixture":
        cm = state.component_mask
        M, hmax = cm.shape
        intercepts = draw_normal(state.mu_q_mu, state.sigma2_q_mu, rng, size=(R, M, hmax))
        alpha = np.where(cm, state.alpha_q_psi2, 1.0)
        beta = np.where(cm, state.beta_q_psi2, 1.0)
        psi2 = np.where(cm, draw_inverse_gamma(alpha, beta, rng, size=(R, M, hmax)), 1.0)
        weights = np.zeros((R, M, hmax))
        for j, h in enumerate(state.H):
            weights[:, j, :h] = 1.0 if h == 1 else draw_dirichlet(state.alpha_q_w[j, :h], rng, size=R)
        eta = draw_normal(state.mu_q_eta, state.sigma2_q_eta, rng, size=(R,) + state.mu_q_eta.shape)
        beta_draw = draw_mvnormal(state.mu_q_beta, state.Sigma_q_beta, rng, size=R)
        sigma2 = draw_inverse_gamma(state.alpha_q_sigma2, state.beta_q_sigma2, rng, size=R)
        return ThetaDraw(intercepts, lam, psi2, weights, eta, beta_draw, sigma2)
    M = state.mu_q_nu.shape[0]
    intercepts = draw_normal(state.mu_q_nu, state.sigma2_q_nu, rng, size=(R, M))[:, :, None]
    psi2 = draw_inverse_gamma(state.alpha_q_psi2, state.beta_q_psi2, rng, size=(R, M))[:, :, None]
    weights = np.ones((R, M, 1))
    eta = draw_normal(state.mu_q_eta, state.sigma2_q_eta, rng, size=(R,) + state.mu_q_eta.shape)
    K = state.K
    beta_draw = np.stack([draw_mvnormal(state.mu_q_beta[k], state.Sigma_q_beta[k], rng, size=R) for k in range(K)], axis=1)
    sigma2 = draw_inverse_gamma(state.alpha_q_sigma2, state.beta_q_sigma2, rng, size=(R, K))
    mixing = np.ones((R, 1)) if K == 1 else draw_dirichlet(state.alpha_q_w, rng, size=R)
    return ThetaDraw(intercepts, lam, psi2, weights, eta, beta_draw, sigma2, mixing)


def _slice(draw: ThetaDraw, lo: int, hi: int) -> ThetaDraw:
    return ThetaDraw(draw.intercepts[lo:hi], draw.lam[lo:hi], draw.psi2[lo:hi], draw.weights[lo:hi],
                     draw.eta[lo:hi], draw.beta[lo:hi], draw.sigma2[lo:hi],
                     None if draw.mixing_w is None else draw.mixing_w[lo:hi])


def loglik_matrix(draw: ThetaDraw, ds: Dataset) -> np.ndarray:
    """R x N matrix of per-individual log densities, indicators summed out."""
    out = np.empty((draw.n_draws, ds.n))
    y = ds.y_filled[None, :, :, None]
    for lo in range(0, draw.n_draws, _CHUNK):
        d = _slice(draw, lo, lo + _CHUNK)
        resid = y - d.intercepts[:, None] - (d.lam[:, None, :] * d.eta[:, :, None])[..., None]
        with np.errstate(divide="ignore"):
            logw = np.log(d.weights)[:, None]
        logp = logw - 0.5 * (LOG_2PI + np.log(d.psi2[:, None])) - 0.5 * resid * resid / d.psi2[:, None]
        top = logp.max(axis=-1)
        cell = top + np.log(np.exp(logp - top[..., None]).sum(axis=-1))
        out[lo:lo + _CHUNK] = np.where(ds.observed[None], cell, 0.0).sum(axis=-1)
    return out


def pointwise_loglik(draw: ThetaDraw, ds: Dataset, i: int | None = None):
    """log p(y_i | theta) for one individual (or all, when ``i`` is None), per draw."""
    if i is None:
        return loglik_matrix(draw, ds)
    rows = np.array([i])
    one = ThetaDraw(draw.intercepts, draw.lam, draw.psi2, draw.weights, draw.eta[:, rows], draw.beta,
                    draw.sigma2, draw.mixing_w)
    return loglik_matrix(one, ds.take(rows))[:, 0]


def _inverse_gamma_mean(alpha, beta, name: str):
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 1):
        bad = np.argwhere(np.atleast_1d(alpha) <= 1)[0]
        raise CriteriaError(f"q({name}) shape {np.atleast_1d(alpha)[tuple(bad)]:.4g} at index {bad.tolist()} "
                            "is not above 1, so its mean does not exist")
    return np.asarray(beta, dtype=float) / (alpha - 1.0)


def plugin_theta(state) -> ThetaDraw:
    """Single 'draw' at the analytic q-means of every block."""
    lam = state.mu_q_lambda.copy()
    lam[0] = 1.0
    if state.model == "outcome-mixture":
        cm = state.component_mask
        psi2 = np.ones(cm.shape)
        psi2[cm] = _inverse_gamma_mean(state.alpha_q_psi2[cm], state.beta_q_psi2[cm], "psi2")
        weights = np.zeros(cm.shape)
        for j, h in enumerate(state.H):
            a = state.alpha_q_w[j, :h]
            weights[j, :h] = 1.0 if h == 1 else a / a.sum()
        sigma2 = _inverse_gamma_mean(state.alpha_q_sigma2, state.beta_q_sigma2, "sigma2")
        return ThetaDraw(state.mu_q_mu[None].copy(), lam[None], psi2[None], weights[None],
                         state.mu_q_eta[None].copy(), state.mu_q_beta[None].copy(), np.atleast_1d(sigma2))
    psi2 = _inverse_gamma_mean(state.alpha_q_psi2, state.beta_q_psi2, "psi2")
    sigma2 = _inverse_gamma_mean(state.alpha_q_sigma2, state.beta_q_sigma2, "sigma2")
    mixing = state.alpha_q_w / state.alpha_q_w.sum() if state.K > 1 else np.ones(1)
    return ThetaDraw(state.mu_q_nu[None, :, None].copy(), lam[None], psi2[None, :, None], np.ones((1, lam.shape[0], 1)),
                     state.mu_q_eta[None].copy(), state.mu_q_beta[None].copy(), sigma2[None], mixing[None])


@dataclass
class CriteriaReport:
    vlppd: float
    p_vwaic: float
    vwaic: float
    loglik_at_plugin: float
    p_vaic: float
    vaic: float
    draws_R: int
    seed: int
    pointwise_unit: str = "per_individual"
    se_vlppd: float = 0.0
    se_p_vwaic: float = 0.0
    se_p_vaic: float = 0.0

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def waic_terms(loglik: np.ndarray) -> tuple[float, float, float, float]:
    """(vlppd, p_vwaic, se_vlppd, se_p_vwaic) from an R x N log-density matrix.

    Per individual, both terms are taken relative to that individual's
    largest draw, so coinciding draws give a penalty of exactly zero.
    """
    R = loglik.shape[0]
    top = loglik.max(axis=0)
    shifted = loglik - top
    rel = np.exp(shifted)
    log_mean = np.log(rel.mean(axis=0))
    mean_log = shifted.mean(axis=0)
    vlppd = float(np.sum(top + log_mean))
    p_vwaic = float(2.0 * np.sum(log_mean - mean_log))
    # delta-method standard errors from per-draw linearizations
    ratio = rel / rel.mean(axis=0)
    lin_lppd = ratio.sum(axis=1)
    lin_p = 2.0 * (ratio - shifted).sum(axis=1)
    se = lambda v: float(np.std(v, ddof=1) / np.sqrt(R)) if R > 1 else 0.0
    return vlppd, p_vwaic, se(lin_lppd), se(lin_p)


def assemble_report(loglik: np.ndarray, loglik_plugin: float, seed: int) -> CriteriaReport:
    R = loglik.shape[0]
    if R < 2:
        raise ValueError("at least two draws are needed")
    vlppd, p_vwaic, se_lppd, se_p = waic_terms(loglik)
    totals = loglik.sum(axis=1)
    p_vaic = 2.0 * (loglik_plugin - float(totals.mean()))
    se_p_vaic = float(2.0 * np.std(totals, ddof=1) / np.sqrt(R))
    return CriteriaReport(
        vlppd=vlppd, p_vwaic=p_vwaic, vwaic=-2.0 * (vlppd - p_vwaic),
        loglik_at_plugin=float(loglik_plugin), p_vaic=p_vaic, vaic=-2.0 * (loglik_plugin - p_vaic),
        draws_R=R, seed=int(seed), se_vlppd=se_lppd, se_p_vwaic=se_p, se_p_vaic=se_p_vaic,
    )


def compute_criteria(state, ds: Dataset, R: int = DEFAULT_DRAWS, seed: int = 0) -> CriteriaReport:
    """Both criteria from the same R draws of q."""
    if R < 2:
        raise ValueError("R must be at least 2")
    plugin = plugin_theta(state)
    draws = sample_theta(state, substream(seed), R)
    ll = loglik_matrix(draws, ds)
    return assemble_report(ll, float(loglik_matrix(plugin, ds).sum()), seed)


def vwaic(state, ds: Dataset, R: int = DEFAULT_DRAWS, seed: int = 0) -> CriteriaReport:
    return compute_criteria(state, ds, R, seed)


def vaic(state, ds: Dataset, R: int = DEFAULT_DRAWS, seed: int = 0) -> CriteriaReport:
    return compute_criteria(state, ds, R, seed)
