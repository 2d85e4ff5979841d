"""Grouped observations and their error model.

Observations come in groups that share bias and error parameters.
Within a group, each observation carries an error budget ``V`` that is
scaled by an unknown group precision factor ``gamma`` and split into a
temporally correlated part (proportion ``rho``, exponential correlation
with e-folding length ``ell``) and white noise (proportion
``1 - rho``).  Correlation applies only within a series (a site, or an
orbit track); distinct series are independent, which keeps the
covariance block diagonal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
from scipy import linalg

from .transport import AveragingFunctional

FloatArray = npt.NDArray[np.float64]

GROUP_KINDS = ("insitu", "satellite_co2", "satellite_sif")


class DataModelError(ValueError):
    """Raised for malformed observation groups or singular error models."""


@dataclass(frozen=True)
class ErrorParams:
    """Error parameters of one observation group."""

    gamma: float
    rho: float
    ell_days: float

    def __post_init__(self) -> None:
        if self.gamma <= 0.0:
            raise DataModelError(f"gamma must be positive, got {self.gamma}")
        if not 0.0 <= self.rho <= 1.0:
            raise DataModelError(f"rho must lie in [0, 1], got {self.rho}")
        if self.ell_days < 0.0:
            raise DataModelError(f"ell must be non-negative, got {self.ell_days}")


@dataclass
class ObservationGroup:
    """One group's observations plus (once built) its linear response.

    ``baseline`` and ``response`` map coefficients to modelled values:
    ``Z_model = baseline + response @ alpha (+ bias_design @ pi)``.
    They are attached after transport / SIF sensitivity assembly.
    ``rho_fixed`` pins rho at 1 (point-referenced in-situ series);
    ``estimate_correlation`` marks the group for the first inference
    stage that learns (rho, ell).
    """

    name: str
    kind: str
    values: FloatArray
    budgets: FloatArray
    series: npt.NDArray[np.int64]
    times: FloatArray
    cells: npt.NDArray[np.int64]
    functional: AveragingFunctional = field(default_factory=AveragingFunctional)
    rho_fixed: bool = False
    estimate_correlation: bool = False
    response: FloatArray | None = None
    baseline: FloatArray | None = None
    bias_design: FloatArray | None = None

    def __post_init__(self) -> None:
        if self.kind not in GROUP_KINDS:
            raise DataModelError(f"unknown group kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=float)
        self.budgets = np.asarray(self.budgets, dtype=float)
        self.series = np.asarray(self.series, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        n = self.values.size
        for name in ("budgets", "series", "times", "cells"):
            if getattr(self, name).shape != (n,):
                raise DataModelError(f"group {self.name!r}: column {name} has wrong length")
        if n == 0:
            raise DataModelError(f"group {self.name!r} is empty")
        if np.any(self.budgets <= 0.0) or not np.all(np.isfinite(self.budgets)):
            raise DataModelError(f"group {self.name!r}: error budgets must be positive and finite")
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.times)):
            raise DataModelError(f"group {self.name!r}: values and times must be finite")

    @property
    def n_obs(self) -> int:
        return self.values.size

    def require_response(self) -> tuple[FloatArray, FloatArray]:
        if self.response is None or self.baseline is None:
            raise DataModelError(f"group {self.name!r} has no response matrix attached")
        return self.response, self.baseline


class GroupCovariance:
    """Block-Cholesky form of one group's unscaled error covariance.

    Represents ``C`` with ``var(errors) = C / gamma``; the caller
    applies the group's gamma.  Blocks follow the series partition.
    """

    def __init__(self, times: FloatArray, budgets: FloatArray, series: npt.NDArray[np.int64],
                 rho: float, ell_days: float) -> None:
        times = np.asarray(times, dtype=float)
        budgets = np.asarray(budgets, dtype=float)
        series = np.asarray(series, dtype=np.int64)
        self.n = times.size
        self.blocks: list[tuple[npt.NDArray[np.int64], FloatArray]] = []
        for s in np.unique(series):
            idx = np.nonzero(series == s)[0]
            t = times[idx]
            v = budgets[idx]
            if rho > 0.0 and ell_days > 0.0:
                corr = np.exp(-np.abs(t[:, None] - t[None, :]) / ell_days)
                cov = rho * np.sqrt(np.outer(v, v)) * corr + (1.0 - rho) * np.diag(v)
            else:
                # either no correlated part or a zero length scale: white
                cov = np.diag(v)
            try:
                chol = linalg.cholesky(cov, lower=True)
            except linalg.LinAlgError as exc:
                raise DataModelError(
                    f"error covariance for series {s} is singular "
                    "(duplicate times with fully correlated errors?)"
                ) from exc
            self.blocks.append((idx, chol))

    def solve(self, x: FloatArray) -> FloatArray:
        """C^-1 x for a vector or a stack of columns (n, m)."""
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for idx, chol in self.blocks:
            out[idx] = linalg.cho_solve((chol, True), x[idx])
        return out

    def quad(self, x: FloatArray) -> float:
        x = np.asarray(x, dtype=float)
        total = 0.0
        for idx, chol in self.blocks:
            w = linalg.solve_triangular(chol, x[idx], lower=True)
            total += float(w @ w)
        return total

    def logdet(self) -> float:
        return 2.0 * sum(float(np.sum(np.log(np.diag(c)))) for _, c in self.blocks)

    def sample(self, rng: np.random.Generator) -> FloatArray:
        out = np.zeros(self.n)
        for idx, chol in self.blocks:
            out[idx] = chol @ rng.standard_normal(idx.size)
        return out

    def dense(self) -> FloatArray:
        out = np.zeros((self.n, self.n))
        for idx, chol in self.blocks:
            out[np.ix_(idx, idx)] = chol @ chol.T
        return out


def error_covariance(group: ObservationGroup, params: ErrorParams) -> GroupCovariance:
    """Unscaled covariance C of a group (total is C / gamma)."""
    rho = 1.0 if group.rho_fixed else params.rho
    return GroupCovariance(group.times, group.budgets, group.series, rho, params.ell_days)


def simulate_observations(group: ObservationGroup, mean: FloatArray, params: ErrorParams,
                          rng: np.random.Generator) -> FloatArray:
    """Draw one synthetic observation vector around the given mean."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (group.n_obs,):
        raise DataModelError("mean vector does not match the group size")
    cov = error_covariance(group, params)
    return mean + cov.sample(rng) / np.sqrt(params.gamma)


def group_residual(group: ObservationGroup, alpha_full: FloatArray,
                   pi: FloatArray | None = None) -> FloatArray:
    """Observation-minus-model residual for the current coefficients."""
    response, baseline = group.require_response()
    resid = group.values - baseline - response @ np.asarray(alpha_full, dtype=float)
    if pi is not None:
        if group.bias_design is None:
            raise DataModelError(f"group {group.name!r} has no bias design matrix")
        resid = resid - group.bias_design @ np.asarray(pi, dtype=float)
    return resid


OBS_HEADER = ["obs_id", "group", "series_id", "cell_id", "time", "value", "error_budget"]


def write_observations(path: str, groups: list[ObservationGroup]) -> None:
    """Write groups to the observation table (CSV, stable ordering)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OBS_HEADER)
        i = 0
        for g in groups:
            for j in range(g.n_obs):
                w.writerow([
                    i, g.name, int(g.series[j]), int(g.cells[j]),
                    format(g.times[j], ".12g"), format(g.values[j], ".17g"),
                    format(g.budgets[j], ".17g"),
                ])
                i += 1


def read_observations(path: str, kinds: dict[str, str],
                      functionals: dict[str, AveragingFunctional] | None = None) -> list[ObservationGroup]:
    """Read an observation table and split it into groups.

    ``kinds`` maps group name to one of ``insitu``, ``satellite_co2``,
    or ``satellite_sif``; every group in the file must be listed.
    In-situ groups come back with ``rho_fixed``; satellite groups are
    flagged for first-stage correlation estimation.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != OBS_HEADER:
        raise DataModelError(f"observation file must start with header {','.join(OBS_HEADER)}")
    by_group: dict[str, list[list[str]]] = {}
    for row in rows[1:]:
        by_group.setdefault(row[1], []).append(row)
    groups = []
    for name in sorted(by_group):
        if name not in kinds:
            raise DataModelError(f"observation group {name!r} has no configured kind")
        kind = kinds[name]
        rows_g = by_group[name]
        functional = (functionals or {}).get(name, AveragingFunctional())
        groups.append(ObservationGroup(
            name=name,
            kind=kind,
            values=np.array([float(r[5]) for r in rows_g]),
            budgets=np.array([float(r[6]) for r in rows_g]),
            series=np.array([int(r[2]) for r in rows_g]),
            times=np.array([float(r[4]) for r in rows_g]),
            cells=np.array([int(r[3]) for r in rows_g]),
            functional=functional,
            rho_fixed=kind == "insitu",
            estimate_correlation=kind != "insitu",
        ))
    return groups
