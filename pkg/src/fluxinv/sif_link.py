"""Linear link between GPP and solar-induced fluorescence (SIF).

For every (grid cell, calendar month) pair with enough bottom-up data,
SIF is regressed on GPP by OLS.  The fitted slope turns the GPP basis
into a SIF sensitivity vector, so SIF observations inform the GPP
scaling coefficients directly.  Cell-months where the linear
relationship is untrustworthy are screened out by four criteria and
contribute nothing (their sensitivity rows are zero and their
observations are dropped).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
from scipy import stats

from .decomposition import FluxBasisSet
from .grid import month_of_year

FloatArray = npt.NDArray[np.float64]


class SifLinkError(ValueError):
    """Raised for ill-posed SIF link fits or missing model pieces."""


@dataclass(frozen=True)
class SifLinkConfig:
    """Validity screening thresholds.

    A cell-month is retained only if (1) at least ``min_positive``
    bottom-up SIF values exceed ``positive_threshold``, (2) an F-test
    does not prefer a cubic fit over the linear one at level
    ``anova_level``, (3) the absolute GPP-SIF correlation is at least
    ``min_abs_corr`` (absolute, because GPP is negative in sign while
    SIF is positive), and (4) the fitted intercept exceeds
    ``intercept_floor``.
    """

    min_positive: int = 30
    positive_threshold: float = 0.1
    anova_level: float = 0.05
    min_abs_corr: float = 0.5
    intercept_floor: float = -0.6
    fence_factor: float = 1.5


@dataclass(frozen=True)
class CellMonthFit:
    """One cell-month's regression record."""

    cell: int
    month: int
    slope: float
    intercept: float
    mse: float
    n_pairs: int
    correlation: float
    fence_lo: float
    fence_hi: float
    valid: bool
    reasons: tuple[str, ...] = ()


@dataclass(frozen=True)
class SifPairs:
    """Bottom-up (GPP, SIF) training pairs on the native time grid."""

    cell: npt.NDArray[np.int64]
    time: FloatArray
    gpp: FloatArray
    sif: FloatArray

    def __post_init__(self) -> None:
        object.__setattr__(self, "cell", np.asarray(self.cell, dtype=np.int64))
        for name in ("time", "gpp", "sif"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.cell.size
        if any(getattr(self, name).shape != (n,) for name in ("time", "gpp", "sif")):
            raise SifLinkError("pair columns must share one length")


@dataclass(frozen=True)
class SifBaseline:
    """Bottom-up SIF field on the native time grid (nearest-time lookup)."""

    times: FloatArray
    values: FloatArray  # (n_cells, n_times)

    def at(self, cell: int, t: float) -> float:
        idx = int(np.argmin(np.abs(self.times - t)))
        return float(self.values[cell, idx])


def fit_cell_month(gpp: FloatArray, sif: FloatArray) -> tuple[float, float, float, float]:
    """OLS fit sif = slope * gpp + intercept.

    Returns (slope, intercept, mse, correlation) where mse is the mean
    squared residual of the fit.
    """
    gpp = np.asarray(gpp, dtype=float)
    sif = np.asarray(sif, dtype=float)
    if gpp.size != sif.size or gpp.size < 3:
        raise SifLinkError("need at least 3 pairs to fit a cell-month")
    sx = float(np.var(gpp))
    spread = float(np.ptp(gpp))
    if sx == 0.0 or spread <= 1e-12 * float(np.abs(gpp).max()):
        raise SifLinkError("GPP values are constant; slope is undefined")
    slope = float(np.cov(gpp, sif, bias=True)[0, 1] / sx)
    intercept = float(np.mean(sif) - slope * np.mean(gpp))
    resid = sif - (slope * gpp + intercept)
    mse = float(np.mean(resid**2))
    sy = float(np.var(sif))
    corr = 0.0 if sy == 0.0 else float(np.cov(gpp, sif, bias=True)[0, 1] / np.sqrt(sx * sy))
    return slope, intercept, mse, corr


def _linear_vs_cubic_pvalue(gpp: FloatArray, sif: FloatArray) -> float:
    """P-value of the F-test comparing the linear fit to a cubic one."""
    n = gpp.size
    if n < 5:
        return 0.0  # cannot defend linearity; treated as a rejection
    # standardize the regressor: same column space, but flux magnitudes
    # (~1e-7) would otherwise underflow the cubic column out of the fit
    z = (gpp - np.mean(gpp)) / np.std(gpp)
    x1 = np.column_stack([np.ones(n), z])
    x3 = np.column_stack([np.ones(n), z, z**2, z**3])
    rss1 = float(np.sum((sif - x1 @ np.linalg.lstsq(x1, sif, rcond=None)[0]) ** 2))
    rss3 = float(np.sum((sif - x3 @ np.linalg.lstsq(x3, sif, rcond=None)[0]) ** 2))
    scale = max(float(np.sum(sif**2)), 1.0)
    if rss3 <= 1e-14 * scale:
        # the cubic fit is essentially perfect; only accept if the linear one is too
        return 1.0 if rss1 <= 1e-14 * scale else 0.0
    f = ((rss1 - rss3) / 2.0) / (rss3 / (n - 4))
    return float(stats.f.sf(max(f, 0.0), 2, n - 4))


def assess_cell_month(cell: int, month: int, gpp: FloatArray, sif: FloatArray,
                      config: SifLinkConfig) -> CellMonthFit:
    """Fit one cell-month and apply all four validity criteria."""
    slope, intercept, mse, corr = fit_cell_month(gpp, sif)
    reasons: list[str] = []
    if int(np.sum(sif > config.positive_threshold)) < config.min_positive:
        reasons.append("count")
    if _linear_vs_cubic_pvalue(gpp, sif) < config.anova_level:
        reasons.append("linearity")
    if abs(corr) < config.min_abs_corr:
        reasons.append("correlation")
    if not intercept > config.intercept_floor:
        reasons.append("intercept")
    q1, q3 = np.percentile(sif, [25.0, 75.0])
    iqr = q3 - q1
    return CellMonthFit(
        cell=int(cell),
        month=int(month),
        slope=slope,
        intercept=intercept,
        mse=mse,
        n_pairs=int(gpp.size),
        correlation=corr,
        fence_lo=float(q1 - config.fence_factor * iqr),
        fence_hi=float(q3 + config.fence_factor * iqr),
        valid=not reasons,
        reasons=tuple(reasons),
    )


class SifLinkModel:
    """Fitted slopes, screening outcomes, and fences for all cell-months."""

    def __init__(self, records: dict[tuple[int, int], CellMonthFit], epoch: str,
                 baseline: SifBaseline | None = None) -> None:
        self.records = dict(records)
        self.epoch = epoch
        self.baseline = baseline

    def record(self, cell: int, t: float) -> CellMonthFit | None:
        month = int(month_of_year(t, self.epoch))
        return self.records.get((int(cell), month))

    def slope_at(self, cell: int, t: float) -> float:
        """Fitted slope for the cell's calendar month; 0 when screened out."""
        rec = self.record(cell, t)
        return rec.slope if rec is not None and rec.valid else 0.0

    def model_error_variance(self, cell: int, t: float) -> float:
        """Retained regression MSE, used as extra observation-error variance."""
        rec = self.record(cell, t)
        return rec.mse if rec is not None and rec.valid else 0.0

    def sensitivity_row(self, basis: FluxBasisSet, cell: int, t: float) -> FloatArray:
        """Row of d(SIF)/d(alpha): slope times the GPP basis row.

        Zero everywhere for screened-out cell-months, and zero outside
        the GPP block always.
        """
        row = np.zeros(basis.n_alpha)
        slope = self.slope_at(cell, t)
        if slope != 0.0:
            sl = basis.layout.component_slice("gpp")
            row[sl] = slope * basis.phi_row(cell, t)[sl]
        return row

    def predict(self, basis: FluxBasisSet, alpha: FloatArray, cell: int, t: float) -> float:
        """Modelled SIF: bottom-up baseline plus the linearised response."""
        if self.baseline is None:
            raise SifLinkError("model carries no baseline SIF field")
        return self.baseline.at(cell, t) + float(self.sensitivity_row(basis, cell, t) @ alpha)

    def screen_observations(self, cells: npt.NDArray[np.int64], times: FloatArray,
                            values: FloatArray) -> npt.NDArray[np.bool_]:
        """Keep observations in valid cell-months and inside the fences.

        The fences are closed intervals, so values equal to a fence are
        retained.
        """
        keep = np.zeros(len(values), dtype=bool)
        for i, (cell, t, v) in enumerate(zip(cells, times, values)):
            rec = self.record(int(cell), float(t))
            if rec is None or not rec.valid:
                continue
            keep[i] = rec.fence_lo <= v <= rec.fence_hi
        return keep


def fit_sif_link(pairs: SifPairs, epoch: str, config: SifLinkConfig | None = None,
                 baseline: SifBaseline | None = None) -> SifLinkModel:
    """Group pairs by (cell, calendar month) and fit each cell-month.

    Cell-months with fewer than 3 pairs or constant GPP cannot be fit
    and are recorded as invalid with reason ``"degenerate"``.
    """
    config = config or SifLinkConfig()
    months = month_of_year(pairs.time, epoch)
    records: dict[tuple[int, int], CellMonthFit] = {}
    order = np.lexsort((months, pairs.cell))
    cells = pairs.cell[order]
    mm = months[order]
    gpp = pairs.gpp[order]
    sif = pairs.sif[order]
    boundaries = np.nonzero((np.diff(cells) != 0) | (np.diff(mm) != 0))[0] + 1
    for chunk in np.split(np.arange(cells.size), boundaries):
        cell, month = int(cells[chunk[0]]), int(mm[chunk[0]])
        try:
            rec = assess_cell_month(cell, month, gpp[chunk], sif[chunk], config)
        except SifLinkError:
            rec = CellMonthFit(cell=cell, month=month, slope=0.0, intercept=0.0, mse=0.0,
                               n_pairs=int(chunk.size), correlation=0.0, fence_lo=np.nan,
                               fence_hi=np.nan, valid=False, reasons=("degenerate",))
        records[(cell, month)] = rec
    return SifLinkModel(records=records, epoch=epoch, baseline=baseline)


def average_retrieval_bands(
    times: FloatArray,
    values: FloatArray,
    error_variances: FloatArray,
    modes: npt.NDArray | None = None,
    band_seconds: float = 10.0,
    min_count: int = 5,
) -> tuple[FloatArray, FloatArray, FloatArray, npt.NDArray[np.int64]]:
    """Average raw retrievals into fixed-width time bands, per mode.

    Times are in days.  Retrievals are grouped by viewing mode (if
    given) and by ``floor(time / band)``; bands with fewer than
    ``min_count`` members are discarded.  Both the values and their
    error variances are averaged.  Returns (times, values, variances,
    counts) sorted by mode then band.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    error_variances = np.asarray(error_variances, dtype=float)
    band = band_seconds / 86400.0
    band_idx = np.floor(times / band).astype(np.int64)
    if modes is None:
        modes = np.zeros(times.size, dtype=np.int64)
    mode_codes, mode_inv = np.unique(np.asarray(modes), return_inverse=True)
    key = mode_inv.astype(np.int64) * (band_idx.max() - band_idx.min() + 1) + (band_idx - band_idx.min())
    uniq, inv, counts = np.unique(key, return_inverse=True, return_counts=True)
    t_out = np.bincount(inv, weights=times) / counts
    v_out = np.bincount(inv, weights=values) / counts
    e_out = np.bincount(inv, weights=error_variances) / counts
    keep = counts >= min_count
    return t_out[keep], v_out[keep], e_out[keep], counts[keep].astype(np.int64)


REPORT_HEADER = [
    "cell_id", "month", "slope", "intercept", "mse", "n_pairs",
    "correlation", "fence_lo", "fence_hi", "valid", "reasons",
]


def write_report(path: str, model: SifLinkModel) -> None:
    """Write the per-cell-month regression report (CSV)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for (cell, month) in sorted(model.records):
            r = model.records[(cell, month)]
            w.writerow([
                cell, month,
                format(r.slope, ".12g"), format(r.intercept, ".12g"),
                format(r.mse, ".12g"), r.n_pairs, format(r.correlation, ".12g"),
                format(r.fence_lo, ".12g"), format(r.fence_hi, ".12g"),
                int(r.valid), "|".join(r.reasons),
            ])


def read_report(path: str, epoch: str, baseline: SifBaseline | None = None) -> SifLinkModel:
    """Read a report written by :func:`write_report`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != REPORT_HEADER:
        raise SifLinkError("not a SIF link report file")
    records = {}
    for row in rows[1:]:
        cell, month = int(row[0]), int(row[1])
        records[(cell, month)] = CellMonthFit(
            cell=cell, month=month, slope=float(row[2]), intercept=float(row[3]),
            mse=float(row[4]), n_pairs=int(row[5]), correlation=float(row[6]),
            fence_lo=float(row[7]), fence_hi=float(row[8]), valid=bool(int(row[9])),
            reasons=tuple(row[10].split("|")) if row[10] else (),
        )
    return SifLinkModel(records=records, epoch=epoch, baseline=baseline)
