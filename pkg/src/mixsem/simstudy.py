"""Replication harness: simulate, fit competing models, tally coverage, MSE and selection wins."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .criteria import compute_criteria
from .fitting import FitOptions, NumericalError
from .latent import LatentInitOptions, LatentMixtureSpec, fit_latent
from .outcome import InitOptions, OutcomeMixtureSpec, fit
from .simulate import SimulationTruth, simulate
from .uncertainty import bootstrap, credible_intervals, point_estimates

log = logging.getLogger(__name__)

# Inverse-Gamma with mean 6.25 and variance 100 for the outcome noise.
SIM_PRIOR = {
    "mu_lambda": 1.0,
    "sigma2_lambda": 1.0,
    "alpha_psi2": 2.390625,
    "beta_psi2": 8.69140625,
    "alpha_sigma2": 1.0,
    "beta_sigma2": 1.0,
    "alpha_w": 10.0,
}
SIM_INTERCEPT_VAR = 100.0
SIM_BETA_VAR = 100.0

VARIANTS = ("true-H", "all-H1", "latent-K2")

# Fixed MCMC and MFVB reference columns for side-by-side display; nothing here is recomputed.
REFERENCE_COVERAGE = {
    "MFVB": {"lambda[2]": 0.36, "lambda[3]": 0.59, "lambda[4]": 0.59, "beta[1]": 0.70, "beta[2]": 0.61,
             "mu[1,1]": 0.44, "mu[2,1]": 0.46, "mu[2,2]": 0.60, "mu[3,1]": 0.50, "mu[3,2]": 0.84,
             "mu[4,1]": 0.58, "psi2[1,1]": 0.86, "psi2[2,1]": 0.76, "psi2[2,2]": 0.89, "psi2[3,1]": 0.89,
             "psi2[3,2]": 0.95, "psi2[4,1]": 0.95, "sigma2": 0.74},
    "MFVB-Bootstrap": {"lambda[2]": 0.86, "lambda[3]": 0.92, "lambda[4]": 0.83, "beta[1]": 0.89, "beta[2]": 0.84,
                       "mu[1,1]": 0.85, "mu[2,1]": 0.84, "mu[2,2]": 0.78, "mu[3,1]": 0.92, "mu[3,2]": 0.91,
                       "mu[4,1]": 0.87, "psi2[1,1]": 0.89, "psi2[2,1]": 0.85, "psi2[2,2]": 0.92,
                       "psi2[3,1]": 0.86, "psi2[3,2]": 0.88, "psi2[4,1]": 0.86, "sigma2": 0.93},
    "MCMC": {"lambda[2]": 0.96, "lambda[3]": 0.97, "lambda[4]": 0.96, "beta[1]": 0.94, "beta[2]": 0.93,
             "mu[1,1]": 0.92, "mu[2,1]": 0.95, "mu[2,2]": 0.96, "mu[3,1]": 0.99, "mu[3,2]": 0.98,
             "mu[4,1]": 0.92, "psi2[1,1]": 0.97, "psi2[2,1]": 0.94, "psi2[2,2]": 0.97, "psi2[3,1]": 0.93,
             "psi2[3,2]": 0.96, "psi2[4,1]": 0.95, "sigma2": 0.98},
}
REFERENCE_MSE = {
    "MFVB": {"lambda[2]": 0.00033, "lambda[3]": 0.00037, "lambda[4]": 0.00009, "beta[1]": 0.00130,
             "beta[2]": 0.00293, "mu[1,1]": 0.04802, "mu[2,1]": 0.02825, "mu[2,2]": 0.02854,
             "mu[3,1]": 0.04056, "mu[3,2]": 0.02911, "mu[4,1]": 0.00736, "psi2[1,1]": 0.05131,
             "psi2[2,1]": 0.04578, "psi2[2,2]": 0.02406, "psi2[3,1]": 0.12209, "psi2[3,2]": 0.06523,
             "psi2[4,1]": 0.00240, "sigma2": 0.02879},
    "MCMC": {"lambda[2]": 0.00034, "lambda[3]": 0.00038, "lambda[4]": 0.00009, "beta[1]": 0.00131,
             "beta[2]": 0.00297, "mu[1,1]": 0.04865, "mu[2,1]": 0.02799, "mu[2,2]": 0.02843,
             "mu[3,1]": 0.04001, "mu[3,2]": 0.02848, "mu[4,1]": 0.00739, "psi2[1,1]": 0.05165,
             "psi2[2,1]": 0.03913, "psi2[2,2]": 0.02354, "psi2[3,1]": 0.12483, "psi2[3,2]": 0.06498,
             "psi2[4,1]": 0.00241, "sigma2": 0.02897},
}


def outcome_spec(H, p: int, prior: dict | None = None) -> OutcomeMixtureSpec:
    return OutcomeMixtureSpec.shared(H, p, sigma2_mu=SIM_INTERCEPT_VAR, Sigma_beta=SIM_BETA_VAR * np.eye(p),
                                     **(prior or SIM_PRIOR))


def latent_spec(K: int, p: int, prior: dict | None = None) -> LatentMixtureSpec:
    return LatentMixtureSpec(K=K, mu_beta=np.zeros(p), Sigma_beta=SIM_BETA_VAR * np.eye(p),
                             sigma2_nu=SIM_INTERCEPT_VAR, **(prior or SIM_PRIOR))


def truth_parameters(truth: SimulationTruth) -> dict[str, float]:
    """Generating values under the same names as ``point_estimates`` of an outcome fit."""
    out: dict[str, float] = {}
    for j in range(1, truth.lam.shape[0]):
        out[f"lambda[{j + 1}]"] = float(truth.lam[j])
    for k, b in enumerate(truth.beta):
        out[f"beta[{k + 1}]"] = float(b)
    out["sigma2"] = float(truth.sigma2)
    for j, h in enumerate(truth.H):
        for c in range(h):
            tag = f"[{j + 1},{c + 1}]"
            out["mu" + tag] = truth.mu[j][c]
            out["psi2" + tag] = truth.psi2[j][c]
            if h > 1:
                out["w" + tag] = truth.w[j][c]
    return out


def replicate_seed(seed: int, r: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=(int(r),)).generate_state(1)[0])


@dataclass
class StudyConfig:
    n_datasets: int = 30
    N: int = 1000
    truth: SimulationTruth = field(default_factory=SimulationTruth)
    variants: tuple[str, ...] = VARIANTS
    B_bootstrap: int = 20
    R_criteria: int = 1000
    seed: int = 0
    level: float = 0.95
    tol: float = 1e-6
    max_iter: int = 2000
    missing_rate: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if isinstance(self.truth, dict):
            self.truth = SimulationTruth.from_dict(self.truth)
        self.variants = tuple(self.variants)
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ValueError(f"unknown fit variant {bad[0]!r}; choose from {', '.join(VARIANTS)}")
        if "true-H" not in self.variants:
            raise ValueError("the true-H variant is required for coverage and MSE")
        if self.n_datasets < 1 or self.N < 1:
            raise ValueError("n_datasets and N must be positive")
        if self.B_bootstrap == 1 or self.B_bootstrap < 0:
            raise ValueError("B_bootstrap must be 0 (skip) or at least 2")
        if self.R_criteria == 1 or self.R_criteria < 0:
            raise ValueError("R_criteria must be 0 (skip) or at least 2")

    def to_dict(self) -> dict:
        return {
            "n_datasets": self.n_datasets, "N": self.N, "truth": self.truth.to_dict(),
            "variants": list(self.variants), "B_bootstrap": self.B_bootstrap, "R_criteria": self.R_criteria,
            "seed": self.seed, "level": self.level, "tol": self.tol, "max_iter": self.max_iter,
            "missing_rate": self.missing_rate,
        }


def _fit_variant(name: str, ds, cfg: StudyConfig, seed: int):
    p = ds.p
    if name == "latent-K2":
        opts = FitOptions(tol=cfg.tol, max_iter=cfg.max_iter, seed=seed, init=LatentInitOptions())
        return fit_latent(latent_spec(2, p), ds, opts)
    H = cfg.truth.H if name == "true-H" else (1,) * ds.m
    opts = FitOptions(tol=cfg.tol, max_iter=cfg.max_iter, seed=seed, init=InitOptions(strategy="regression"))
    return fit(outcome_spec(H, p), ds, opts)


def run_replicate(cfg: StudyConfig, r: int) -> dict:
    """Everything the aggregate tables need from one simulated dataset."""
    seed = replicate_seed(cfg.seed, r)
    record: dict = {"replicate": r, "seed": seed, "errors": {}}
    ds, _ = simulate(cfg.truth, cfg.N, seed, cfg.missing_rate)
    criteria = {}
    for name in cfg.variants:
        try:
            state, report = _fit_variant(name, ds, cfg, seed)
        except (NumericalError, ValueError) as exc:
            record["errors"][name] = str(exc)
            continue
        if name == "true-H":
            record["iterations"] = report.iterations
            record["converged"] = report.converged
            record["estimates"] = point_estimates(state)
            record["plain"] = {k: list(v) for k, v in credible_intervals(state, cfg.level).items()}
            if cfg.B_bootstrap:
                opts = FitOptions(tol=cfg.tol, max_iter=cfg.max_iter, seed=seed, init=InitOptions(strategy="regression"))
                try:
                    boot = bootstrap(outcome_spec(cfg.truth.H, ds.p), ds, cfg.B_bootstrap, opts, seed, cfg.level)
                    record["bootstrap"] = {k: list(v) for k, v in boot.intervals.items()}
                except (NumericalError, ValueError) as exc:
                    record["errors"]["bootstrap"] = str(exc)
        if cfg.R_criteria:
            try:
                rep = compute_criteria(state, ds, cfg.R_criteria, seed)
                criteria[name] = {"vaic": rep.vaic, "vwaic": rep.vwaic, "p_vaic": rep.p_vaic,
                                  "p_vwaic": rep.p_vwaic, "se_p_vwaic": rep.se_p_vwaic}
            except (NumericalError, ValueError) as exc:
                record["errors"][f"criteria:{name}"] = str(exc)
    record["criteria"] = criteria
    return record


def _winner(criteria: dict, key: str) -> str:
    if not criteria:
        return "failed"
    return min(criteria, key=lambda name: (criteria[name][key], VARIANTS.index(name)))


def tally_coverage(intervals: list[dict], truth: dict[str, float]) -> dict[str, float]:
    """Share of replicates whose interval for each parameter contains its true value."""
    out = {}
    for name, t in truth.items():
        hits = [lo <= t <= hi for iv in intervals if name in iv for lo, hi in [iv[name]]]
        out[name] = float(np.mean(hits)) if hits else float("nan")
    return out


def tally_mse(estimates: list[dict], truth: dict[str, float]) -> dict[str, float]:
    out = {}
    for name, t in truth.items():
        vals = np.array([e[name] for e in estimates if name in e])
        out[name] = float(np.mean((vals - t) ** 2)) if vals.size else float("nan")
    return out


@dataclass
class StudyReport:
    config: dict
    replicates: list[dict]
    coverage: dict[str, dict[str, float]]
    mse: dict[str, float]
    selection: dict[str, dict[str, int]]
    elapsed: float = 0.0

    def to_dict(self) -> dict:
        # timing is left out so reruns serialize identically
        return {
            "config": self.config,
            "coverage": self.coverage,
            "mse": self.mse,
            "selection": self.selection,
            "reference": {"coverage": REFERENCE_COVERAGE, "mse": REFERENCE_MSE},
            "replicates": self.replicates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def write_tables(self, directory) -> list[Path]:
        """Coverage, MSE and selection tables as CSV (rows: method; columns: parameters)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = list(self.mse)
        paths = []

        def write(fname, header, rows):
            path = directory / fname
            with open(path, "w", newline="") as fh:
                out = csv.writer(fh, lineterminator="\n")
                out.writerow(header)
                out.writerows(rows)
            paths.append(path)

        fmt = lambda v: "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))
        cov_rows = [[method] + [fmt(vals.get(n)) for n in names] for method, vals in self.coverage.items()]
        cov_rows += [[f"{m} (reference)"] + [fmt(v.get(n)) for n in names] for m, v in REFERENCE_COVERAGE.items()]
        write("coverage.csv", ["method"] + names, cov_rows)
        mse_rows = [["MFVB"] + [fmt(self.mse[n]) for n in names]]
        mse_rows += [[f"{m} (reference)"] + [fmt(v.get(n)) for n in names] for m, v in REFERENCE_MSE.items()]
        write("mse.csv", ["method"] + names, mse_rows)
        crit = list(self.selection)
        keys = sorted({k for c in crit for k in self.selection[c]},
                      key=lambda k: VARIANTS.index(k) if k in VARIANTS else len(VARIANTS) + (k == "failed"))
        write("selection.csv", ["variant"] + crit, [[k] + [self.selection[c].get(k, 0) for c in crit] for k in keys])
        return paths


def aggregate(cfg: StudyConfig, records: list[dict]) -> StudyReport:
    truth = truth_parameters(cfg.truth)
    fitted = [r for r in records if "estimates" in r]
    coverage = {"MFVB": tally_coverage([r["plain"] for r in fitted], truth)}
    if cfg.B_bootstrap:
        coverage["MFVB-Bootstrap"] = tally_coverage([r["bootstrap"] for r in fitted if "bootstrap" in r], truth)
    mse = tally_mse([r["estimates"] for r in fitted], truth)
    selection: dict[str, dict[str, int]] = {}
    if cfg.R_criteria:
        for key in ("vaic", "vwaic"):
            counts = {v: 0 for v in cfg.variants}
            counts["failed"] = 0
            for r in records:
                counts[_winner(r["criteria"], key)] += 1
            selection[key] = counts
        both = {v: 0 for v in cfg.variants}
        both["split"] = 0
        both["failed"] = 0
        for r in records:
            a, b = _winner(r["criteria"], "vaic"), _winner(r["criteria"], "vwaic")
            both[a if a == b else "split"] += 1
        selection["both"] = both
    return StudyReport(cfg.to_dict(), records, coverage, mse, selection)


def _run_one(args):
    cfg, r = args
    return run_replicate(cfg, r)


def run_study(cfg: StudyConfig) -> StudyReport:
    """Deterministic given the config; replicates may run in worker processes."""
    start = time.perf_counter()
    tasks = [(cfg, r) for r in range(cfg.n_datasets)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_run_one, tasks))
    else:
        records = [_run_one(t) for t in tasks]
    report = aggregate(cfg, records)
    report.elapsed = time.perf_counter() - start
    return report
