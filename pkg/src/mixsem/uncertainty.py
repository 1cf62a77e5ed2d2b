"""Credible intervals from q, percentile bootstrap, posterior-predictive replicates and KDE."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import stats

from .criteria import ThetaDraw, sample_theta
from .data import Dataset
from .fitting import FitOptions, NumericalError
from .kernels import draw_categorical, substream
from .latent import LatentMixtureSpec, fit_latent
from .outcome import OutcomeMixtureSpec, fit

log = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.2


class GaussianBlock(NamedTuple):
    mean: float
    var: float


class InverseGammaBlock(NamedTuple):
    alpha: float
    beta: float


class BetaBlock(NamedTuple):
    """Marginal of one Dirichlet coordinate: Beta(alpha_h, sum(alpha) - alpha_h)."""

    a: float
    b: float


def credible_interval(block, level: float = 0.95) -> tuple[float, float]:
    """Central interval of one q-marginal."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    tail = 0.5 * (1.0 - level)
    if isinstance(block, GaussianBlock):
        if block.var == 0:
            return float(block.mean), float(block.mean)
        z = stats.norm.ppf(1.0 - tail)
        sd = np.sqrt(block.var)
        return float(block.mean - z * sd), float(block.mean + z * sd)
    if isinstance(block, InverseGammaBlock):
        law = stats.invgamma(block.alpha, scale=block.beta)
        return float(law.ppf(tail)), float(law.ppf(1.0 - tail))
    if isinstance(block, BetaBlock):
        law = stats.beta(block.a, block.b)
        return float(law.ppf(tail)), float(law.ppf(1.0 - tail))
    raise TypeError(f"unsupported q-block {type(block).__name__}")


def _ig_mean(alpha, beta) -> float:
    return float(beta / (alpha - 1.0)) if alpha > 1 else float("nan")


def q_blocks(state) -> dict[str, object]:
    """Every reported scalar parameter with its q-marginal, keyed by a 1-based name."""
    out: dict[str, object] = {}
    M = state.mu_q_lambda.shape[0]
    for j in range(1, M):
        out[f"lambda[{j + 1}]"] = GaussianBlock(state.mu_q_lambda[j], state.sigma2_q_lambda[j])
    if state.model == "outcome-mixture":
        for k in range(state.mu_q_beta.shape[0]):
            out[f"beta[{k + 1}]"] = GaussianBlock(state.mu_q_beta[k], state.Sigma_q_beta[k, k])
        out["sigma2"] = InverseGammaBlock(state.alpha_q_sigma2, state.beta_q_sigma2)
        for j, h in enumerate(state.H):
            total = state.alpha_q_w[j, :h].sum()
            for c in range(h):
                tag = f"[{j + 1},{c + 1}]"
                out["mu" + tag] = GaussianBlock(state.mu_q_mu[j, c], state.sigma2_q_mu[j, c])
                out["psi2" + tag] = InverseGammaBlock(state.alpha_q_psi2[j, c], state.beta_q_psi2[j, c])
                if h > 1:
                    out["w" + tag] = BetaBlock(state.alpha_q_w[j, c], total - state.alpha_q_w[j, c])
        return out
    for j in range(M):
        out[f"nu[{j + 1}]"] = GaussianBlock(state.mu_q_nu[j], state.sigma2_q_nu[j])
        out[f"psi2[{j + 1}]"] = InverseGammaBlock(state.alpha_q_psi2[j], state.beta_q_psi2[j])
    K = state.K
    total = state.alpha_q_w.sum()
    for k in range(K):
        for c in range(state.mu_q_beta.shape[1]):
            out[f"beta[{k + 1},{c + 1}]"] = GaussianBlock(state.mu_q_beta[k, c], state.Sigma_q_beta[k, c, c])
        out[f"sigma2[{k + 1}]"] = InverseGammaBlock(state.alpha_q_sigma2[k], state.beta_q_sigma2[k])
        if K > 1:
            out[f"w[{k + 1}]"] = BetaBlock(state.alpha_q_w[k], total - state.alpha_q_w[k])
    return out


def block_mean(block) -> float:
    if isinstance(block, GaussianBlock):
        return float(block.mean)
    if isinstance(block, InverseGammaBlock):
        return _ig_mean(block.alpha, block.beta)
    return float(block.a / (block.a + block.b))


def point_estimates(state) -> dict[str, float]:
    """q-means of every reported parameter."""
    return {name: block_mean(b) for name, b in q_blocks(state).items()}


def credible_intervals(state, level: float = 0.95) -> dict[str, tuple[float, float]]:
    return {name: credible_interval(b, level) for name, b in q_blocks(state).items()}


def percentile_interval(values, level: float = 0.95) -> tuple[float, float]:
    """Empirical quantiles with linear interpolation between order statistics."""
    v = np.asarray(values, dtype=float)
    tail = 0.5 * (1.0 - level)
    lo, hi = np.quantile(v, [tail, 1.0 - tail], method="linear")
    return float(lo), float(hi)


def fit_any(spec, ds: Dataset, options: FitOptions):
    if isinstance(spec, OutcomeMixtureSpec):
        return fit(spec, ds, options)
    if isinstance(spec, LatentMixtureSpec):
        return fit_latent(spec, ds, options)
    raise TypeError(f"unsupported model spec {type(spec).__name__}")


def resample_indices(n: int, B: int, seed: int) -> np.ndarray:
    """B x n row indices; replicate b uses its own substream."""
    return np.stack([substream(seed, b).integers(0, n, n) for b in range(B)])


def _bootstrap_task(args):
    spec, ds, rows, options = args
    try:
        state, _ = fit_any(spec, ds.take(rows), options)
        return point_estimates(state), None
    except (NumericalError, np.linalg.LinAlgError, ValueError) as exc:
        return None, str(exc)


@dataclass
class BootstrapResult:
    names: list[str]
    estimates: np.ndarray  # successful replicates x parameters
    intervals: dict[str, tuple[float, float]]
    level: float
    seed: int
    B: int
    failures: list[tuple[int, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "B": self.B,
            "seed": self.seed,
            "level": self.level,
            "failures": [{"replicate": b, "error": e} for b, e in self.failures],
            "parameters": {
                name: {"interval": list(self.intervals[name]), "estimates": self.estimates[:, k].tolist()}
                for k, name in enumerate(self.names)
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def bootstrap(spec, ds: Dataset, B: int = 20, fit_options: FitOptions | None = None, seed: int = 0,
              level: float = 0.95, workers: int = 1) -> BootstrapResult:
    """Percentile intervals from B refits on row-resampled data.

    Each replicate resamples whole individuals (outcomes, mask and covariates)
    and refits from the same starting scheme; estimates are q-means after the
    fit's own component sorting.  Failed replicates are skipped and recorded.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    options = fit_options or FitOptions()
    index_sets = resample_indices(ds.n, B, seed)
    tasks = [(spec, ds, rows, options) for rows in index_sets]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_bootstrap_task, tasks))
    else:
        results = [_bootstrap_task(t) for t in tasks]
    failures = [(b, err) for b, (_, err) in enumerate(results) if err is not None]
    if len(failures) > MAX_FAILURE_SHARE * B:
        raise NumericalError(f"{len(failures)} of {B} bootstrap replicates failed; first: {failures[0][1]}")
    good = [est for est, err in results if err is None]
    names = list(good[0])
    estimates = np.array([[est[n] for n in names] for est in good])
    intervals = {n: percentile_interval(estimates[:, k], level) for k, n in enumerate(names)}
    for b, err in failures:
        log.warning("bootstrap replicate %d failed: %s", b, err)
    return BootstrapResult(names, estimates, intervals, level, seed, B, failures)


def replicate_from_theta(draw: ThetaDraw, ds: Dataset, rng: np.random.Generator) -> np.ndarray:
    """Replicated outcomes (R x N x M) given parameter draws; missing cells stay NaN."""
    R, M, hmax = draw.weights.shape
    N = ds.n
    comp = np.zeros((R, N, M), dtype=int)
    if hmax > 1:
        probs = np.broadcast_to(draw.weights[:, None], (R, N, M, hmax))
        comp = draw_categorical(probs, rng)
    take = lambda arr: np.take_along_axis(np.broadcast_to(arr[:, None], (R, N, M, hmax)), comp[..., None], axis=-1)[..., 0]
    mean = take(draw.intercepts) + draw.lam[:, None, :] * draw.eta[:, :, None]
    y = mean + np.sqrt(take(draw.psi2)) * rng.standard_normal((R, N, M))
    return np.where(ds.observed[None], y, np.nan)


def posterior_predictive(state, ds: Dataset, n_draws: int = 300, seed: int = 0) -> np.ndarray:
    """n_draws replicated datasets, each from its own draw of q, on the observed cells only."""
    rng = substream(seed)
    draw = sample_theta(state, rng, n_draws)
    return replicate_from_theta(draw, ds, rng)


def silverman_bandwidth(values: np.ndarray) -> float:
    n = values.shape[0]
    sd = float(np.std(values, ddof=1))
    q75, q25 = np.quantile(values, [0.75, 0.25])
    spread = min(sd, (q75 - q25) / 1.34) if q75 > q25 else sd
    return 0.9 * spread * n ** (-0.2)


def kde(values, bandwidth: float | None = None, grid: np.ndarray | None = None, points: int = 512):
    """Gaussian-kernel density; the default grid spans the data range +- 3 bandwidths."""
    v = np.asarray(values, dtype=float).ravel()
    if v.shape[0] < 2:
        raise ValueError("kde needs at least two values")
    if np.all(v == v[0]):
        raise ValueError("kde is degenerate on constant input")
    bw = silverman_bandwidth(v) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ValueError("bandwidth must be positive")
    if grid is None:
        grid = np.linspace(v.min() - 3 * bw, v.max() + 3 * bw, points)
    z = (grid[:, None] - v[None, :]) / bw
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (v.shape[0] * bw * np.sqrt(2 * np.pi))
    return grid, dens


def write_ppc_csv(replicates: np.ndarray, ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["draw", "individual", "outcome", "value"])
        R = replicates.shape[0]
        rows, cols = np.nonzero(ds.observed)
        for r in range(R):
            for i, j in zip(rows, cols):
                out.writerow([r + 1, i + 1, ds.outcome_names[j], repr(float(replicates[r, i, j]))])


def write_kde_csv(replicates: np.ndarray, ds: Dataset, path, points: int = 512) -> None:
    """Per outcome: the observed-data density, each replicate's density and their pointwise mean,
    all on one grid."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["outcome", "grid", "density", "draw"])
        for j, name in enumerate(ds.outcome_names):
            obs = ds.observed[:, j]
            data = ds.y[obs, j]
            reps = replicates[:, obs, j]
            bw = silverman_bandwidth(data)
            grid = np.linspace(min(data.min(), reps.min()) - 3 * bw, max(data.max(), reps.max()) + 3 * bw, points)
            dens = np.array([kde(reps[r], grid=grid)[1] for r in range(reps.shape[0])])
            blocks = [("observed", kde(data, grid=grid)[1])]
            blocks += [(str(r + 1), dens[r]) for r in range(dens.shape[0])]
            blocks += [("mean", dens.mean(axis=0))]
            for label, d in blocks:
                for g, v in zip(grid, d):
                    out.writerow([name, repr(float(g)), repr(float(v)), label])
