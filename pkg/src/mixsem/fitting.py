"""Coordinate-ascent driver shared by the outcome- and latent-mixture fitters."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, TypeVar

import numpy as np

log = logging.getLogger(__name__)

S = TypeVar("S")

# Floor in the relative-change denominator so parameters near zero do not stall convergence.
REL_FLOOR = 1e-8


class NumericalError(ArithmeticError):
    """A coordinate update produced a non-finite or non-SPD quantity."""

    def __init__(self, message: str, iteration: int | None = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


@dataclass
class FitOptions:
    tol: float = 1e-6
    max_iter: int = 500
    init: object | None = None
    seed: int = 0


@dataclass
class FitReport:
    iterations: int
    converged: bool
    metric_trace: list[float] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def monotone(self) -> bool:
        """Whether the convergence metric never increased (reported, not enforced)."""
        t = np.asarray(self.metric_trace)
        return bool(np.all(np.diff(t) <= 0)) if t.size > 1 else True

    def to_dict(self) -> dict:
        # elapsed time is left out so that serialized fits are reproducible byte-for-byte
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "monotone": self.monotone,
            "metric_trace": [float(v) for v in self.metric_trace],
        }


def relative_change(old: np.ndarray, new: np.ndarray) -> float:
    if old.size == 0:
        return 0.0
    return float(np.max(np.abs(new - old) / (np.abs(old) + REL_FLOOR)))


def coordinate_ascent(
    state: S,
    sweep: Callable[[S], S],
    flatten: Callable[[S], np.ndarray],
    tol: float = 1e-6,
    max_iter: int = 500,
) -> tuple[S, FitReport]:
    """Sweep until the largest relative parameter change falls below ``tol``.

    Never raises on non-convergence; the report carries the flag instead.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    start = time.perf_counter()
    trace: list[float] = []
    prev = flatten(state)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            state = sweep(state)
        except NumericalError as exc:
            raise NumericalError(str(exc), iteration=it) from None
        except (np.linalg.LinAlgError, ArithmeticError) as exc:
            raise NumericalError(f"{type(exc).__name__}: {exc}", iteration=it) from None
        cur = flatten(state)
        if not np.all(np.isfinite(cur)):
            raise NumericalError("non-finite variational parameter", iteration=it)
        metric = relative_change(prev, cur)
        trace.append(metric)
        prev = cur
        if metric < tol:
            converged = True
            break
    report = FitReport(iterations=it, converged=converged, metric_trace=trace,
                       elapsed=time.perf_counter() - start)
    if not converged:
        log.info("no convergence after %d sweeps (last change %.3g)", it, trace[-1])
    return state, report


def spd_inverse(prec: np.ndarray, what: str) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix via Cholesky."""
    if prec.size == 0:
        return prec.copy()
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} precision matrix is not positive definite") from None
    inv_chol = np.linalg.solve(chol, np.eye(prec.shape[0]))
    out = inv_chol.T @ inv_chol
    return 0.5 * (out + out.T)


def softmax_rows(tau: np.ndarray) -> np.ndarray:
    e = np.exp(tau - tau.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
