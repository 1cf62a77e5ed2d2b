"""Datasets with missing outcome cells, CSV ingestion and outcome rescaling."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Dataset:
    """Outcomes ``y`` (N x M, NaN where unobserved), the observed mask and covariates ``x``.

    Every row needs at least one observed outcome, and the covariates must not
    contain an intercept column since intercepts live in the outcome equations.
    """

    y: np.ndarray
    observed: np.ndarray
    x: np.ndarray
    outcome_names: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()
    scale_factors: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        obs = np.array(self.observed, dtype=bool)
        x = np.array(self.x, dtype=float)
        if y.ndim != 2 or y.shape[0] < 1 or y.shape[1] < 1:
            raise DataError(f"outcome matrix must be N x M with N, M >= 1, got shape {y.shape}")
        if obs.shape != y.shape:
            raise DataError("observed mask must match the outcome matrix shape")
        if x.ndim == 1 and x.size == 0:
            x = x.reshape(y.shape[0], 0)
        if x.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError(f"covariate matrix must have {y.shape[0]} rows, got shape {x.shape}")
        y = np.where(obs, y, np.nan)
        if not np.all(np.isfinite(y[obs])):
            raise DataError("observed outcome cells must be finite")
        if not np.all(np.isfinite(x)):
            raise DataError("covariates must be finite")
        empty = np.flatnonzero(~obs.any(axis=1))
        if empty.size:
            raise DataError(f"row {empty[0] + 1} has no observed outcome")
        ones = [k for k in range(x.shape[1]) if np.all(x[:, k] == 1.0)]
        if ones:
            raise DataError(f"covariate column {ones[0] + 1} is an intercept (all ones)")
        names = tuple(self.outcome_names) or tuple(f"y{j + 1}" for j in range(y.shape[1]))
        cov_names = tuple(self.covariate_names) or tuple(f"x{k + 1}" for k in range(x.shape[1]))
        if len(names) != y.shape[1] or len(cov_names) != x.shape[1]:
            raise DataError("column name lists do not match the matrix widths")
        y.setflags(write=False)
        obs.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "outcome_names", names)
        object.__setattr__(self, "covariate_names", cov_names)
        if self.scale_factors is not None:
            object.__setattr__(self, "scale_factors", np.asarray(self.scale_factors, dtype=float))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def m(self) -> int:
        return self.y.shape[1]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def y_filled(self) -> np.ndarray:
        """Outcomes with unobserved cells replaced by 0 (never read by the fitters)."""
        return np.where(self.observed, self.y, 0.0)

    def n_observed(self) -> np.ndarray:
        return self.observed.sum(axis=0)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return replace(self, y=self.y[rows], observed=self.observed[rows], x=self.x[rows])


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: value {text!r} is not finite")
    return value


def load_csv(
    path,
    outcome_columns: Sequence[str] | None = None,
    covariate_columns: Sequence[str] = (),
    missing_token: str | Sequence[str] | None = None,
) -> Dataset:
    """Read a header-first CSV into a Dataset.

    Outcome cells equal to a missing token (default: empty or ``NA``) are
    flagged unobserved.  Covariate cells must all be present.  When
    ``outcome_columns`` is None every non-covariate column is an outcome.
    Row numbers in error messages count data rows from 1.
    """
    path = Path(path)
    if missing_token is None:
        tokens = set(DEFAULT_MISSING_TOKENS)
    elif isinstance(missing_token, str):
        tokens = {missing_token, *DEFAULT_MISSING_TOKENS}
    else:
        tokens = set(missing_token)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        covariate_columns = list(covariate_columns)
        if outcome_columns is None:
            outcome_columns = [h for h in header if h not in covariate_columns]
        outcome_columns = list(outcome_columns)
        for col in outcome_columns + covariate_columns:
            if col not in header:
                raise DataError(f"{path}: column {col!r} not found in header")
        o_idx = [header.index(c) for c in outcome_columns]
        c_idx = [header.index(c) for c in covariate_columns]
        ys, masks, xs = [], [], []
        for r, line in enumerate(reader, start=1):
            if not line:
                continue
            if len(line) != len(header):
                raise DataError(f"{path}: row {r} has {len(line)} fields, expected {len(header)}")
            yrow, mrow = [], []
            for k, col in zip(o_idx, outcome_columns):
                cell = line[k].strip()
                if cell in tokens:
                    yrow.append(np.nan)
                    mrow.append(False)
                else:
                    yrow.append(_parse_float(cell, r, col))
                    mrow.append(True)
            if not any(mrow):
                raise DataError(f"{path}: row {r} has no observed outcome")
            xrow = []
            for k, col in zip(c_idx, covariate_columns):
                cell = line[k].strip()
                if cell in tokens:
                    raise DataError(f"{path}: row {r}, column {col!r}: missing covariate value")
                xrow.append(_parse_float(cell, r, col))
            ys.append(yrow)
            masks.append(mrow)
            xs.append(xrow)
    if not ys:
        raise DataError(f"{path}: no data rows")
    x = np.asarray(xs, dtype=float).reshape(len(ys), len(covariate_columns))
    return Dataset(
        y=np.asarray(ys, dtype=float),
        observed=np.asarray(masks, dtype=bool),
        x=x,
        outcome_names=tuple(outcome_columns),
        covariate_names=tuple(covariate_columns),
    )


def write_csv(ds: Dataset, path, missing_token: str = "") -> None:
    """Write outcomes then covariates; floats use the shortest round-trip repr."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(ds.outcome_names) + list(ds.covariate_names))
        for i in range(ds.n):
            row = [repr(float(ds.y[i, j])) if ds.observed[i, j] else missing_token for j in range(ds.m)]
            row += [repr(float(v)) for v in ds.x[i]]
            writer.writerow(row)


def standardize_outcomes(ds: Dataset, target_sd: float = 15.0) -> Dataset:
    """Rescale each outcome so its observed-cell sample sd equals ``target_sd``.

    Only multiplies; means are not shifted.  Multipliers are recorded in
    ``scale_factors`` (compounded with any earlier scaling).
    """
    if not target_sd > 0:
        raise DataError("target_sd must be positive")
    factors = np.empty(ds.m)
    for j in range(ds.m):
        vals = ds.y[ds.observed[:, j], j]
        if vals.size < 2:
            raise DataError(f"outcome {ds.outcome_names[j]!r} has fewer than 2 observed values")
        sd = float(np.std(vals, ddof=1))
        if not sd > 0:
            raise DataError(f"outcome {ds.outcome_names[j]!r} is constant; cannot standardize")
        factors[j] = target_sd / sd
    previous = ds.scale_factors if ds.scale_factors is not None else np.ones(ds.m)
    return replace(ds, y=ds.y * factors, scale_factors=previous * factors)
