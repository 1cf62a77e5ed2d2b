"""Versioned JSON configuration shared by the command-line tools.

A config is one JSON object with ``"schema_version": 1`` and any of the
sections below.  Unknown keys anywhere are rejected so typos surface early.
``preset:NAME`` loads one of the presets bundled with the package.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

import numpy as np

from .data import Dataset, load_csv, standardize_outcomes
from .heuristics import intercept_prior_means
from .latent import LatentMixtureSpec
from .outcome import OutcomeMixtureSpec
from .simulate import CovariateLaw, SimulationTruth

SCHEMA_VERSION = 1

_PRIOR_KEYS = ("mu_lambda", "sigma2_lambda", "alpha_psi2", "beta_psi2", "alpha_sigma2", "beta_sigma2", "alpha_w",
               "mu_beta", "Sigma_beta")
SECTIONS = {
    "data": {"required": (), "optional": ("outcome_columns", "covariate_columns", "missing_token", "standardize_sd")},
    "truth": {"required": ("beta", "lambda", "mu", "psi2", "w", "sigma2"), "optional": ("covariate_law",)},
    "simulate": {"required": (), "optional": ("n", "missing_rate", "seed")},
    "outcome-mixture": {"required": ("H", "mu_mu", "sigma2_mu") + _PRIOR_KEYS, "optional": ()},
    "latent-mixture": {"required": ("K", "mu_nu", "sigma2_nu") + _PRIOR_KEYS, "optional": ("pin_nu1",)},
    "variants": None,
    "fit": {"required": (), "optional": ("tol", "max_iter", "init", "seed")},
    "study": {"required": (), "optional": ("n_datasets", "N", "B_bootstrap", "R_criteria", "seed", "level",
                                           "variants", "missing_rate", "tol", "max_iter")},
}


class ConfigError(ValueError):
    """Configuration that does not match the schema; the message names file and key."""


def _preset_path(name: str):
    return resources.files("mixsem").joinpath("presets", f"{name}.json")


def load_config(path) -> tuple[dict, str]:
    """Parse and validate a config file; returns (config, display name)."""
    text_path = str(path)
    if text_path.startswith("preset:"):
        name = text_path.split(":", 1)[1]
        res = _preset_path(name)
        if not res.is_file():
            raise ConfigError(f"{text_path}: no bundled preset named {name!r}")
        raw = res.read_text(encoding="utf-8")
    else:
        try:
            raw = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{text_path}: cannot read config ({exc.strerror})") from None
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{text_path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    validate_config(cfg, text_path)
    return cfg, text_path


def validate_config(cfg, where: str) -> None:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{where}: top level must be a JSON object")
    if "schema_version" not in cfg:
        raise ConfigError(f"{where}: missing key 'schema_version'")
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"{where}: key 'schema_version' must be {SCHEMA_VERSION}, got {cfg['schema_version']!r}")
    for key, body in cfg.items():
        if key == "schema_version":
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        rules = SECTIONS[key]
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: key {key!r} must be an object")
        if rules is None:
            continue
        allowed = set(rules["required"]) | set(rules["optional"])
        for sub in body:
            if sub not in allowed:
                raise ConfigError(f"{where}: unknown key '{key}.{sub}'")
        for sub in rules["required"]:
            if sub not in body:
                raise ConfigError(f"{where}: missing key '{key}.{sub}'")


def section(cfg: dict, name: str, where: str, required: bool = True) -> dict:
    if name not in cfg:
        if required:
            raise ConfigError(f"{where}: missing key {name!r}")
        return {}
    return cfg[name]


def _vector(value, p: int, key: str, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(p, float(arr))
    if arr.shape != (p,):
        raise ConfigError(f"{where}: key {key!r} needs {p} entries, got shape {arr.shape}")
    return arr


def _matrix(value, p: int, key: str, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(p)
    if arr.shape != (p, p):
        raise ConfigError(f"{where}: key {key!r} needs a {p} x {p} matrix, got shape {arr.shape}")
    return arr


def _prior(block: dict, p: int, where: str, prefix: str) -> dict:
    out = {k: float(block[k]) for k in _PRIOR_KEYS if k not in ("mu_beta", "Sigma_beta")}
    out["mu_beta"] = _vector(block["mu_beta"], p, f"{prefix}.mu_beta", where)
    out["Sigma_beta"] = _matrix(block["Sigma_beta"], p, f"{prefix}.Sigma_beta", where)
    return out


def resolve_H(cfg: dict, where: str, variant: str | None = None) -> tuple[int, ...]:
    block = section(cfg, "outcome-mixture", where)
    if variant is None:
        H = block["H"]
    else:
        variants = cfg.get("variants", {})
        if variant not in variants:
            raise ConfigError(f"{where}: key 'variants.{variant}' not found")
        H = variants[variant]
    if not isinstance(H, list) or not all(isinstance(h, int) and h >= 1 for h in H):
        raise ConfigError(f"{where}: key 'H' must be a list of positive integers")
    return tuple(H)


def outcome_spec_from_config(cfg: dict, ds: Dataset, where: str, H=None, seed: int = 0) -> OutcomeMixtureSpec:
    """Build the outcome-mixture spec; ``mu_mu: "mixreg"`` derives intercept prior means from the data."""
    block = section(cfg, "outcome-mixture", where)
    H = tuple(H) if H is not None else resolve_H(cfg, where)
    if len(H) != ds.m:
        raise ConfigError(f"{where}: key 'outcome-mixture.H' lists {len(H)} outcomes but the data has {ds.m}")
    mu_mu = block["mu_mu"]
    if mu_mu == "mixreg":
        mu_mu = intercept_prior_means(ds, H, seed)
    elif isinstance(mu_mu, str):
        raise ConfigError(f"{where}: key 'outcome-mixture.mu_mu' must be a number, a list or \"mixreg\"")
    return OutcomeMixtureSpec(H=H, mu_mu=mu_mu, sigma2_mu=block["sigma2_mu"],
                              **_prior(block, ds.p, where, "outcome-mixture"))


def latent_spec_from_config(cfg: dict, ds: Dataset, where: str) -> LatentMixtureSpec:
    block = section(cfg, "latent-mixture", where)
    K = block["K"]
    if not isinstance(K, int) or K < 1:
        raise ConfigError(f"{where}: key 'latent-mixture.K' must be a positive integer")
    pin = block.get("pin_nu1")
    return LatentMixtureSpec(K=K, mu_nu=float(block["mu_nu"]), sigma2_nu=float(block["sigma2_nu"]),
                             pin_nu1=None if pin is None else float(pin),
                             **_prior(block, ds.p, where, "latent-mixture"))


def truth_from_config(cfg: dict, where: str) -> SimulationTruth:
    block = dict(section(cfg, "truth", where))
    law = block.pop("covariate_law", None)
    kw = {"lam": block.pop("lambda"), **block}
    if law is not None:
        kw["covariate_law"] = CovariateLaw(tuple(tuple(c) for c in law))
    try:
        return SimulationTruth(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: key 'truth': {exc}") from None


def data_options(cfg: dict | None, covariates: str | None = None) -> dict:
    """Column and scaling options, with a comma-separated ``covariates`` flag taking precedence."""
    block = dict((cfg or {}).get("data", {}))
    if covariates is not None:
        block["covariate_columns"] = [c for c in covariates.split(",") if c]
    block.setdefault("outcome_columns", None)
    block.setdefault("covariate_columns", [])
    block.setdefault("missing_token", None)
    block.setdefault("standardize_sd", None)
    return block


def read_dataset(path, options: dict) -> Dataset:
    ds = load_csv(path, options["outcome_columns"], options["covariate_columns"], options["missing_token"])
    if options["standardize_sd"] is not None:
        ds = standardize_outcomes(ds, float(options["standardize_sd"]))
    return ds
