"""Command-line entry point: ``mixsem <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 no convergence (outputs still
written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    data_options,
    latent_spec_from_config,
    load_config,
    outcome_spec_from_config,
    read_dataset,
    resolve_H,
    section,
    truth_from_config,
)
from .criteria import DEFAULT_DRAWS, CriteriaError, compute_criteria
from .data import DataError, write_csv
from .fitting import FitOptions, NumericalError
from .heuristics import bic_scores
from .latent import LatentInitOptions, LatentMixtureSpec, LatentQState, fit_latent, latent_fit_to_json
from .outcome import InitOptions, OutcomeMixtureSpec, OutcomeQState, SpecError, fit, fit_to_json
from .simstudy import StudyConfig, run_study
from .simulate import simulate
from .uncertainty import bootstrap, posterior_predictive, write_kde_csv, write_ppc_csv

EXIT_OK, EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4
MODELS = ("outcome-mixture", "latent-mixture")
OUTCOME_INITS = ("spread", "regression")
LATENT_INITS = ("mixreg", "anchor")

log = logging.getLogger("mixsem")


class UsageError(ValueError):
    pass


def _write_text(path, text: str) -> None:
    Path(path).write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")


def _positive(name: str, value, allow_zero: bool = False):
    if value is None:
        return value
    if value < 0 or (value == 0 and not allow_zero):
        raise UsageError(f"--{name} must be {'non-negative' if allow_zero else 'positive'}, got {value}")
    return value


# ---- fitting helpers -------------------------------------------------------


def _fit_setup(args):
    cfg, where = load_config(args.config)
    opts = data_options(cfg, args.covariates)
    ds = read_dataset(args.data, opts)
    fit_block = cfg.get("fit", {})
    tol = args.tol if args.tol is not None else float(fit_block.get("tol", 1e-6))
    max_iter = args.max_iter if args.max_iter is not None else int(fit_block.get("max_iter", 500))
    seed = args.seed if args.seed is not None else int(fit_block.get("seed", 0))
    _positive("tol", tol)
    _positive("max-iter", max_iter)
    config_init = fit_block.get("init")
    if args.model == "outcome-mixture":
        H = resolve_H(cfg, where, args.variant)
        spec = outcome_spec_from_config(cfg, ds, where, H=H, seed=seed)
        strategy = args.init or (config_init if config_init in OUTCOME_INITS else "regression")
        if strategy not in OUTCOME_INITS:
            raise UsageError(f"--init {strategy} is not available for outcome-mixture ({', '.join(OUTCOME_INITS)})")
        # data-derived prior means are also the natural starting intercepts
        mu_start = spec.mu_mu if section(cfg, "outcome-mixture", where)["mu_mu"] == "mixreg" else None
        init = InitOptions(strategy=strategy, mu_q_mu=mu_start)
    else:
        spec = latent_spec_from_config(cfg, ds, where)
        strategy = args.init or (config_init if config_init in LATENT_INITS else "mixreg")
        if strategy not in LATENT_INITS:
            raise UsageError(f"--init {strategy} is not available for latent-mixture ({', '.join(LATENT_INITS)})")
        init = LatentInitOptions(strategy=strategy)
    return cfg, where, opts, ds, spec, FitOptions(tol=tol, max_iter=max_iter, init=init, seed=seed)


def _fit_document(spec, state, report, data_opts: dict) -> dict:
    text = fit_to_json(spec, state, report) if isinstance(spec, OutcomeMixtureSpec) else latent_fit_to_json(spec, state, report)
    doc = json.loads(text)
    doc["data"] = data_opts
    return doc


def load_fit(path):
    """(spec, state, data options) from a fit JSON written by ``mixsem fit``."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"{path}: cannot read fit ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    for key in ("model", "spec", "state"):
        if key not in doc:
            raise UsageError(f"{path}: missing key {key!r}")
    if doc["model"] == OutcomeQState.model:
        spec, state = OutcomeMixtureSpec.from_dict(doc["spec"]), OutcomeQState.from_dict(doc["state"])
    elif doc["model"] == LatentQState.model:
        spec, state = LatentMixtureSpec.from_dict(doc["spec"]), LatentQState.from_dict(doc["state"])
    else:
        raise UsageError(f"{path}: key 'model' has unknown value {doc['model']!r}")
    return spec, state, data_options({"data": doc.get("data", {})})


def _check_fit_data(path, state, ds) -> None:
    if not np.array_equal(state.observed, ds.observed):
        raise UsageError(f"{path}: fitted state does not match the observed pattern of the data")


# ---- subcommands -----------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg, where = load_config(args.config)
    truth = truth_from_config(cfg, where)
    block = cfg.get("simulate", {})
    n = args.n if args.n is not None else block.get("n")
    if n is None:
        raise UsageError("--n is required when the config has no 'simulate.n'")
    _positive("n", n)
    seed = args.seed if args.seed is not None else int(block.get("seed", 0))
    rate = args.missing_rate if args.missing_rate is not None else float(block.get("missing_rate", 0.0))
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"--missing-rate must lie in [0, 1), got {rate}")
    ds, _ = simulate(truth, int(n), seed, rate)
    names = data_options(cfg)["covariate_columns"]
    if len(names) == ds.p:
        ds = replace(ds, covariate_names=tuple(names))
    write_csv(ds, args.out)
    if args.truth_out:
        _write_text(args.truth_out, json.dumps({"seed": seed, "n": int(n), "missing_rate": rate, **truth.to_dict()}, indent=1))
    return EXIT_OK


def cmd_select_components(args) -> int:
    cfg = load_config(args.config)[0] if args.config else None
    opts = data_options(cfg, args.covariates)
    ds = read_dataset(args.data, opts)
    _positive("max-h", args.max_h)
    outcomes = []
    for j, name in enumerate(ds.outcome_names):
        scores = bic_scores(ds.y[ds.observed[:, j], j], args.max_h, seed=args.seed + j, restarts=args.restarts)
        outcomes.append({"outcome": name, "H": int(np.argmin(scores)) + 1,
                         "bic": [None if not np.isfinite(s) else s for s in scores]})
    doc = {"max_h": args.max_h, "seed": args.seed, "H": [o["H"] for o in outcomes], "outcomes": outcomes}
    _write_text(args.out, json.dumps(doc, indent=1))
    return EXIT_OK


def cmd_fit(args) -> int:
    _, _, opts, ds, spec, options = _fit_setup(args)
    if args.warm_start:
        prev_spec, prev_state, _ = load_fit(args.warm_start)
        _check_fit_data(args.warm_start, prev_state, ds)
        if type(prev_spec) is not type(spec):
            raise UsageError(f"{args.warm_start}: warm start is a {prev_state.model} fit, not {args.model}")
        options.init = (InitOptions if isinstance(spec, OutcomeMixtureSpec) else LatentInitOptions)(warm_start=prev_state)
    runner = fit if isinstance(spec, OutcomeMixtureSpec) else fit_latent
    state, report = runner(spec, ds, options)
    _write_text(args.out, json.dumps(_fit_document(spec, state, report, opts), indent=1))
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["iteration", "metric"])
            for it, m in enumerate(report.metric_trace, start=1):
                out.writerow([it, repr(float(m))])
    if not report.converged:
        print(f"warning: no convergence after {report.iterations} sweeps "
              f"(last change {report.metric_trace[-1]:.3g}); output written to {args.out}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = [p for p in args.fits.split(",") if p]
    if len(paths) < 1:
        raise UsageError("--fits needs at least one fit file")
    _positive("draws", args.draws)
    if args.draws < 2:
        raise UsageError("--draws must be at least 2")
    rows = []
    for path in paths:
        spec, state, opts = load_fit(path)
        if args.covariates is not None:
            opts = data_options({"data": opts}, args.covariates)
        ds = read_dataset(args.data, opts)
        _check_fit_data(path, state, ds)
        rep = compute_criteria(state, ds, args.draws, args.seed)
        rows.append({"fit": path, "model": state.model, **rep.to_dict()})
    rows.sort(key=lambda r: r["vwaic"])
    best_vaic = min(r["vaic"] for r in rows)
    for k, r in enumerate(rows):
        r["winner"] = k == 0
        r["lowest_vaic"] = r["vaic"] == best_vaic
    _write_text(args.out, json.dumps({"draws": args.draws, "seed": args.seed, "sorted_by": "vwaic",
                                      "models": rows}, indent=1))
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    _, _, _, ds, spec, options = _fit_setup(args)
    if args.replicates < 2:
        raise UsageError(f"--replicates must be at least 2, got {args.replicates}")
    res = bootstrap(spec, ds, args.replicates, options, options.seed, args.level, workers=args.threads)
    _write_text(args.out, res.to_json())
    return EXIT_OK


def cmd_ppc(args) -> int:
    _positive("draws", args.draws)
    spec, state, opts = load_fit(args.fit)
    if args.covariates is not None:
        opts = data_options({"data": opts}, args.covariates)
    ds = read_dataset(args.data, opts)
    _check_fit_data(args.fit, state, ds)
    reps = posterior_predictive(state, ds, args.draws, args.seed)
    write_ppc_csv(reps, ds, args.out)
    if args.kde_out:
        write_kde_csv(reps, ds, args.kde_out)
    return EXIT_OK


def cmd_study(args) -> int:
    cfg, where = load_config(args.config)
    block = dict(cfg.get("study", {}))
    if "truth" in cfg:
        block["truth"] = truth_from_config(cfg, where)
    if args.n_datasets is not None:
        block["n_datasets"] = args.n_datasets
    if args.seed is not None:
        block["seed"] = args.seed
    block["workers"] = args.threads
    try:
        study = StudyConfig(**block)
    except ValueError as exc:
        raise ConfigError(f"{where}: key 'study': {exc}") from None
    report = run_study(study)
    _write_text(args.out, report.to_json())
    if args.tables_dir:
        report.write_tables(args.tables_dir)
    print(f"study finished: {study.n_datasets} datasets in {report.elapsed:.1f}s", file=sys.stderr)
    return EXIT_OK


# ---- parser ----------------------------------------------------------------


def _add_fit_args(p, out_required: bool = True):
    p.add_argument("--model", choices=MODELS, default="outcome-mixture")
    p.add_argument("--data", required=True, help="CSV with a header row")
    p.add_argument("--config", required=True, help="model config JSON, or preset:NAME")
    p.add_argument("--covariates", help="comma-separated covariate columns (overrides the config)")
    p.add_argument("--variant", help="take H from the config's 'variants' entry of this name")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--init", choices=OUTCOME_INITS + LATENT_INITS)
    p.add_argument("--out", required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixsem", description="Mixture SEMs fitted by mean-field variational Bayes.")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for study and bootstrap")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="draw a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--truth-out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select-components", help="BIC choice of mixture components per outcome")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--covariates")
    p.add_argument("--max-h", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select_components)

    p = sub.add_parser("fit", help="fit one model")
    _add_fit_args(p)
    p.add_argument("--trace", help="CSV of the convergence metric per sweep")
    p.add_argument("--warm-start", help="fit JSON to start from")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("compare", help="VWAIC and VAIC of fitted models")
    p.add_argument("--fits", required=True, help="comma-separated fit JSON files")
    p.add_argument("--data", required=True)
    p.add_argument("--covariates")
    p.add_argument("--draws", type=int, default=DEFAULT_DRAWS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("bootstrap", help="percentile bootstrap intervals")
    _add_fit_args(p)
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--level", type=float, default=0.95)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("ppc", help="posterior-predictive replicates")
    p.add_argument("--fit", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--covariates")
    p.add_argument("--draws", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--kde-out")
    p.set_defaults(func=cmd_ppc)

    p = sub.add_parser("study", help="replication study on simulated data")
    p.add_argument("--config", required=True)
    p.add_argument("--n-datasets", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--tables-dir")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_INVALID
    if hasattr(args, "level") and not 0.0 < args.level < 1.0:
        print("error: --level must lie in (0, 1)", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, SpecError, UsageError, CriteriaError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
