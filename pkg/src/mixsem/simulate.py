"""Synthetic data from the outcome-mixture (or latent-mixture) generative model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .kernels import substream


@dataclass
class CovariateLaw:
    """Independent covariate columns, each ``("normal", mean, variance)`` or ``("uniform", lo, hi)``."""

    columns: tuple = (("normal", 3.0, 4.0), ("uniform", 0.0, 5.0))

    def draw(self, n: int, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((n, len(self.columns)))
        for k, (kind, a, b) in enumerate(self.columns):
            if kind == "normal":
                out[:, k] = a + np.sqrt(b) * rng.standard_normal(n)
            elif kind == "uniform":
                out[:, k] = rng.uniform(a, b, n)
            else:
                raise ValueError(f"unknown covariate law {kind!r}")
        return out

    def means(self) -> np.ndarray:
        return np.array([a if kind == "normal" else 0.5 * (a + b) for kind, a, b in self.columns])

    def to_list(self) -> list:
        return [list(c) for c in self.columns]


def _default_mu():
    return [[2.0], [-4.0, 4.0], [-4.0, 5.0], [1.0]]


def _default_psi2():
    return [[3.0], [2.0, 1.5], [2.5, 2.0], [2.5]]


def _default_w():
    return [[1.0], [0.5, 0.5], [0.4, 0.6], [1.0]]


@dataclass
class SimulationTruth:
    """Generating parameters.  Ragged per-outcome lists for ``mu``, ``psi2`` and ``w``."""

    beta: np.ndarray = field(default_factory=lambda: np.array([1.0, 2.0]))
    lam: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.8, 0.5, 0.2]))
    mu: list = field(default_factory=_default_mu)
    psi2: list = field(default_factory=_default_psi2)
    w: list = field(default_factory=_default_w)
    sigma2: float = 4.0
    covariate_law: CovariateLaw = field(default_factory=CovariateLaw)

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        self.mu = [list(map(float, r)) for r in self.mu]
        self.psi2 = [list(map(float, r)) for r in self.psi2]
        self.w = [list(map(float, r)) for r in self.w]
        if isinstance(self.covariate_law, (list, tuple)):
            self.covariate_law = CovariateLaw(tuple(tuple(c) for c in self.covariate_law))
        M = self.lam.shape[0]
        if not (len(self.mu) == len(self.psi2) == len(self.w) == M):
            raise ValueError("mu, psi2 and w need one entry per outcome")
        if self.lam[0] != 1.0:
            raise ValueError("the first loading must equal 1")
        for j in range(M):
            if not (len(self.mu[j]) == len(self.psi2[j]) == len(self.w[j]) >= 1):
                raise ValueError(f"outcome {j + 1}: mu, psi2 and w lengths differ")
            w = np.asarray(self.w[j])
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"outcome {j + 1}: weights must lie on the simplex")
            if np.any(np.asarray(self.psi2[j]) < 0):
                raise ValueError(f"outcome {j + 1}: variances must be non-negative")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be non-negative")
        if len(self.covariate_law.columns) != self.beta.shape[0]:
            raise ValueError("covariate law and beta disagree on the number of covariates")

    @property
    def H(self) -> tuple[int, ...]:
        return tuple(len(r) for r in self.mu)

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "lambda": self.lam.tolist(),
            "mu": self.mu,
            "psi2": self.psi2,
            "w": self.w,
            "sigma2": float(self.sigma2),
            "H": list(self.H),
            "covariate_law": self.covariate_law.to_list(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationTruth":
        d = dict(d)
        d.pop("H", None)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)


def _mask(n: int, m: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    observed = rng.random((n, m)) >= rate
    empty = ~observed.any(axis=1)
    while np.any(empty):
        observed[empty] = rng.random((int(empty.sum()), m)) >= rate
        empty = ~observed.any(axis=1)
    return observed


def simulate(truth: SimulationTruth, n: int, seed: int, missing_rate: float = 0.0) -> tuple[Dataset, np.ndarray]:
    """Draw one dataset and its latent factors.

    Cells are hidden independently with probability ``missing_rate``; rows
    that lose every outcome are redrawn.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if not 0.0 <= missing_rate < 1.0:
        raise ValueError("missing_rate must lie in [0, 1)")
    rng = substream(seed, 0)
    x = truth.covariate_law.draw(n, rng)
    eta = x @ truth.beta + np.sqrt(truth.sigma2) * rng.standard_normal(n)
    M = truth.lam.shape[0]
    y = np.empty((n, M))
    for j in range(M):
        w = np.asarray(truth.w[j])
        comp = rng.choice(w.shape[0], size=n, p=w) if w.shape[0] > 1 else np.zeros(n, dtype=int)
        mu = np.asarray(truth.mu[j])[comp]
        sd = np.sqrt(np.asarray(truth.psi2[j]))[comp]
        y[:, j] = mu + truth.lam[j] * eta + sd * rng.standard_normal(n)
    observed = _mask(n, M, missing_rate, rng) if missing_rate > 0 else np.ones((n, M), dtype=bool)
    ds = Dataset(y=np.where(observed, y, np.nan), observed=observed, x=x)
    return ds, eta


@dataclass
class LatentTruth:
    """Generating parameters for the latent-mixture model (used for recovery checks)."""

    betas: np.ndarray
    sigma2: np.ndarray
    w: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    psi2: np.ndarray
    covariate_law: CovariateLaw = field(default_factory=CovariateLaw)


def simulate_latent(truth: LatentTruth, n: int, seed: int) -> tuple[Dataset, np.ndarray, np.ndarray]:
    rng = substream(seed, 1)
    x = truth.covariate_law.draw(n, rng)
    betas = np.atleast_2d(truth.betas)
    comp = rng.choice(betas.shape[0], size=n, p=np.asarray(truth.w))
    eta = np.einsum("ip,ip->i", x, betas[comp]) + np.sqrt(np.asarray(truth.sigma2)[comp]) * rng.standard_normal(n)
    y = np.asarray(truth.nu) + np.outer(eta, truth.lam) + np.sqrt(truth.psi2) * rng.standard_normal((n, len(truth.lam)))
    return Dataset(y=y, observed=np.ones_like(y, dtype=bool), x=x), eta, comp
