"""Scoring of posterior flux estimates against known truths.

Fluxes are compared on region-by-period aggregates expressed in
petagrams of carbon per year, the usual reporting unit for budget
work.  Point accuracy uses RMSE of the posterior mean; distributional
accuracy uses the continuous ranked probability score (CRPS).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import stats

from .decomposition import FluxBasisSet

FloatArray = npt.NDArray[np.float64]

CARBON_FRACTION = 12.011 / 44.009  # kg C per kg CO2
SECONDS_PER_YEAR = 86400.0 * 365.25
KG_PER_PG = 1.0e12


def kg_co2_s_to_pgc_yr(x: npt.ArrayLike) -> FloatArray:
    """Convert a CO2 mass flux (kg s^-1) to carbon (PgC yr^-1)."""
    return np.asarray(x, dtype=float) * (CARBON_FRACTION * SECONDS_PER_YEAR / KG_PER_PG)


def rmse(estimate: npt.ArrayLike, truth: npt.ArrayLike) -> float:
    e = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    return float(np.sqrt(np.mean(e * e)))


def crps_ensemble(samples: npt.ArrayLike, y: float) -> float:
    """CRPS of an empirical ensemble against a scalar outcome.

    Uses CRPS = E|X - y| - E|X - X'| / 2 with both expectations over
    the empirical distribution (the pair term divides by m^2, keeping
    the zero diagonal pairs).  The pair sum is computed from the order
    statistics, sum_{i,j} |x_i - x_j| = 2 sum_k (2k - m - 1) x_(k).
    """
    x = np.sort(np.asarray(samples, dtype=float))
    m = x.size
    if m < 2:
        raise ValueError("CRPS needs at least two ensemble members")
    term1 = float(np.mean(np.abs(x - y)))
    k = np.arange(1, m + 1)
    pair_sum = 2.0 * float(np.sum((2 * k - m - 1) * x))
    return term1 - 0.5 * pair_sum / (m * m)


def crps_ensemble_mean(samples: FloatArray, y: npt.ArrayLike) -> float:
    """Average CRPS over outcomes; ``samples`` is (n_draws, n_outcomes)."""
    samples = np.asarray(samples, dtype=float)
    y = np.asarray(y, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != y.size:
        raise ValueError("samples must be (n_draws, n_outcomes)")
    return float(np.mean([crps_ensemble(samples[:, i], y[i]) for i in range(y.size)]))


def crps_normal(mu: float, sigma: float, y: float) -> float:
    """Closed-form CRPS of a Gaussian forecast."""
    if sigma <= 0.0:
        return abs(y - mu)
    z = (y - mu) / sigma
    return float(sigma * (z * (2.0 * stats.norm.cdf(z) - 1.0)
                          + 2.0 * stats.norm.pdf(z) - 1.0 / math.sqrt(math.pi)))


# -- flux aggregation ------------------------------------------------------


def component_aggregates(basis: FluxBasisSet, alpha_full: FloatArray, component: str) -> FloatArray:
    """Region-by-period mean fluxes (PgC yr^-1) for coefficient draws.

    ``alpha_full`` is a single coefficient vector or a stack of draws
    (n_draws, n_alpha); the result has one row per draw, columns in
    region-major period-minor order.
    """
    alpha_full = np.atleast_2d(np.asarray(alpha_full, dtype=float))
    sl = basis.layout.component_slice(component)
    agg = basis.aggregation_matrix(component)
    base = basis.x0_aggregates(component)
    return kg_co2_s_to_pgc_yr(base[None, :] + alpha_full[:, sl] @ agg.T)


def nee_aggregates(basis: FluxBasisSet, alpha_full: FloatArray) -> FloatArray:
    """Net land exchange: GPP plus respiration aggregates (PgC yr^-1)."""
    return (component_aggregates(basis, alpha_full, "gpp")
            + component_aggregates(basis, alpha_full, "resp"))


QUANTITIES = ("gpp", "resp", "nee", "ocean")


def quantity_aggregates(basis: FluxBasisSet, alpha_full: FloatArray, quantity: str) -> FloatArray:
    if quantity == "nee":
        return nee_aggregates(basis, alpha_full)
    if quantity not in QUANTITIES:
        raise ValueError(f"unknown quantity {quantity!r}")
    return component_aggregates(basis, alpha_full, quantity)


def window_columns(basis: FluxBasisSet, periods: tuple[int, ...] | None) -> npt.NDArray[np.int64]:
    """Column indices of the scored (region, period) cells.

    ``periods`` lists 1-based period ids inside the evaluation window;
    None scores everything (no buffer periods to exclude).
    """
    n_r = basis.layout.n_regions
    n_q = basis.layout.n_periods
    if periods is None:
        return np.arange(n_r * n_q, dtype=np.int64)
    qs = np.asarray(sorted(periods), dtype=np.int64)
    if qs.size == 0 or qs[0] < 1 or qs[-1] > n_q:
        raise ValueError("evaluation periods must be non-empty and within the study window")
    return ((np.arange(n_r)[:, None] * n_q) + (qs[None, :] - 1)).ravel()


@dataclass(frozen=True)
class QuantityScore:
    """Aggregate skill of one posterior for one flux quantity."""

    quantity: str
    rmse: float
    crps: float
    truth_scale: float  # RMS of the truth, for relative comparisons
    n_cells: int  # (region, period) combinations scored


def score_quantity(basis: FluxBasisSet, alpha_draws_full: FloatArray,
                   alpha_truth_full: FloatArray, quantity: str,
                   periods: tuple[int, ...] | None = None) -> QuantityScore:
    cols = window_columns(basis, periods)
    draws = quantity_aggregates(basis, alpha_draws_full, quantity)[:, cols]
    truth = quantity_aggregates(basis, alpha_truth_full, quantity)[0, cols]
    return QuantityScore(
        quantity=quantity,
        rmse=rmse(draws.mean(axis=0), truth),
        crps=crps_ensemble_mean(draws, truth),
        truth_scale=float(np.sqrt(np.mean(truth * truth))),
        n_cells=cols.size,
    )


SCORE_HEADER = ["experiment", "truth_case", "quantity", "rmse_pgc_yr", "crps_pgc_yr",
                "truth_rms_pgc_yr", "n_cells"]


def write_scores(path: str, rows: list[tuple[str, str, QuantityScore]]) -> None:
    """Write a score table; formatting is fixed so output is reproducible."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        for experiment, truth_case, s in rows:
            writer.writerow([experiment, truth_case, s.quantity,
                             format(s.rmse, ".12e"), format(s.crps, ".12e"),
                             format(s.truth_scale, ".12e"), str(s.n_cells)])


def read_scores(path: str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SCORE_HEADER:
            raise ValueError(f"unexpected score table header in {path}")
        return list(reader)
