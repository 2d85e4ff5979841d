"""Harmonic decomposition of bottom-up fluxes and the scaling basis.

Each flux component (GPP, respiration, ocean) is fit per grid cell with
an ordinary-least-squares harmonic regression

    x(t) = b0 + b1 t + sum_k [ (b2k + b3k t) cos(2 pi k t / P)
                             + (b4k + b5k t) sin(2 pi k t / P) ] + resid(t)

with P = 365.25 days.  The basis then scales every coefficient field
(and the residual field) by one free multiplier per region (per region
and period for the residual), so the flux under a coefficient vector
``alpha`` is the bottom-up flux plus a linear perturbation, and
``alpha = 0`` reproduces the bottom-up flux exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import numpy.typing as npt

from .grid import RegionPartition, SpatialGrid, TimePartition

FloatArray = npt.NDArray[np.float64]

HARMONIC_PERIOD_DAYS = 365.25
COMPONENTS = ("gpp", "resp", "ocean")
#: number of scaled coefficient families per harmonic: cos, t*cos, sin, t*sin
_SEASONAL_FAMILIES = 4


class DecompositionError(ValueError):
    """Raised when a harmonic fit or basis construction is ill-posed."""


@dataclass(frozen=True)
class BottomUpFluxes:
    """Bottom-up flux fields on the native time grid (kg CO2 m^-2 s^-1)."""

    times: FloatArray
    fields: dict[str, FloatArray]

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or np.any(np.diff(t) <= 0):
            raise DecompositionError("native times must be strictly increasing")
        clean = {}
        n = None
        for name, vals in self.fields.items():
            v = np.asarray(vals, dtype=float)
            if v.ndim != 2 or v.shape[1] != t.size:
                raise DecompositionError(f"field {name!r} must be (n_cells, n_times)")
            if n is None:
                n = v.shape[0]
            elif v.shape[0] != n:
                raise DecompositionError("fields must share one cell dimension")
            clean[name] = v
        object.__setattr__(self, "fields", clean)

    @property
    def n_cells(self) -> int:
        return next(iter(self.fields.values())).shape[0]

    def component(self, name: str) -> FloatArray:
        try:
            return self.fields[name]
        except KeyError:
            raise DecompositionError(f"no bottom-up field for component {name!r}") from None

    def total(self) -> FloatArray:
        """Sum of all stored fields (decomposed components plus any extras)."""
        return sum(self.fields.values())


def design_matrix(times: npt.ArrayLike, n_harmonics: int, period: float = HARMONIC_PERIOD_DAYS) -> FloatArray:
    """Regression design: [1, t, cos_k, t cos_k, sin_k, t sin_k] blocks.

    Columns are grouped by coefficient family (all cos harmonics, then
    all t*cos, and so on), matching the basis element ordering.
    """
    t = np.asarray(times, dtype=float)
    cols = [np.ones_like(t), t]
    w = 2.0 * np.pi / period
    harmonics = np.arange(1, n_harmonics + 1)
    cos = np.cos(w * np.outer(t, harmonics))
    sin = np.sin(w * np.outer(t, harmonics))
    for block in (cos, t[:, None] * cos, sin, t[:, None] * sin):
        cols.extend(block.T)
    return np.column_stack(cols)


class HarmonicFit:
    """Per-cell harmonic coefficients and residuals for one component."""

    def __init__(self, times: FloatArray, beta: FloatArray, residual: FloatArray, n_harmonics: int,
                 period: float = HARMONIC_PERIOD_DAYS) -> None:
        self.times = np.asarray(times, dtype=float)
        self.beta = np.asarray(beta, dtype=float)  # (n_cells, 2 + 4K)
        self.residual = np.asarray(residual, dtype=float)  # (n_cells, n_times)
        self.n_harmonics = int(n_harmonics)
        self.period = float(period)

    @property
    def n_cells(self) -> int:
        return self.beta.shape[0]

    def coefficient(self, j: int, k: int | None = None) -> FloatArray:
        """Field of coefficients for family ``j`` (0=intercept, 1=trend,
        2=cos, 3=t*cos, 4=sin, 5=t*sin), harmonic ``k`` for j >= 2."""
        if j in (0, 1):
            return self.beta[:, j]
        if not 2 <= j <= 5:
            raise DecompositionError(f"coefficient family {j} out of range 0..5")
        if k is None or not 1 <= k <= self.n_harmonics:
            raise DecompositionError(f"harmonic index {k} out of range 1..{self.n_harmonics}")
        return self.beta[:, 2 + (j - 2) * self.n_harmonics + (k - 1)]

    def evaluate(self, times: npt.ArrayLike) -> FloatArray:
        """Fitted harmonic part on arbitrary times, (n_cells, n_times)."""
        x = design_matrix(times, self.n_harmonics, self.period)
        return self.beta @ x.T

    def residual_at(self, times: npt.ArrayLike) -> FloatArray:
        """Residual field sampled at the given times.

        Times inside the fitted record map to the nearest native sample.
        Times after the record repeat the most recent year of residuals
        (whole multiples of the harmonic period are subtracted until the
        time falls inside the record).
        """
        t = np.atleast_1d(np.asarray(times, dtype=float)).copy()
        t0, t1 = self.times[0], self.times[-1]
        if np.any(t < t0 - 1e-9):
            raise DecompositionError("residuals are undefined before the fitted record")
        late = t > t1
        if np.any(late):
            wraps = np.ceil((t[late] - t1) / self.period)
            t[late] -= wraps * self.period
            if np.any(t[late] < t0 - 1e-9):
                raise DecompositionError("record too short to recycle a trailing year of residuals")
        idx = np.clip(np.searchsorted(self.times, t), 1, self.times.size - 1)
        left = self.times[idx - 1]
        right = self.times[idx]
        idx = np.where(t - left <= right - t, idx - 1, idx)
        return self.residual[:, idx]


def fit_harmonics(times: npt.ArrayLike, values: npt.ArrayLike, n_harmonics: int,
                  period: float = HARMONIC_PERIOD_DAYS) -> HarmonicFit:
    """OLS harmonic fit of every cell's series against the shared design.

    Requires at least ``2 + 4 * n_harmonics`` samples and a full-rank
    design (repeated or aliased times make it rank deficient).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if y.ndim != 2 or y.shape[1] != t.size:
        raise DecompositionError("values must be (n_cells, n_times)")
    p = 2 + _SEASONAL_FAMILIES * n_harmonics
    if t.size < p:
        raise DecompositionError(f"need at least {p} samples to fit {n_harmonics} harmonics, got {t.size}")
    x = design_matrix(t, n_harmonics, period)
    beta, _, rank, _ = np.linalg.lstsq(x, y.T, rcond=None)
    if rank < p:
        raise DecompositionError(f"harmonic design is rank deficient (rank {rank} < {p})")
    residual = y - (beta.T @ x.T)
    return HarmonicFit(times=t, beta=beta.T, residual=residual, n_harmonics=n_harmonics, period=period)


def fit_components(bottomup: BottomUpFluxes, n_harmonics: dict[str, int]) -> dict[str, HarmonicFit]:
    """Fit every decomposed component of a bottom-up flux set."""
    return {
        c: fit_harmonics(bottomup.times, bottomup.component(c), n_harmonics[c])
        for c in COMPONENTS
    }


class ElementKey(NamedTuple):
    """Identity of one basis element (region/period ids are 1-based)."""

    component: str
    family: int  # 0 intercept, 1 trend, 2..5 seasonal, 6 residual
    harmonic: int | None
    region: int
    period: int | None


@dataclass(frozen=True)
class AlphaLayout:
    """Index layout of the stacked scaling-coefficient vector.

    Within a component the blocks run: intercept scalings (one per
    region), trend scalings, seasonal scalings grouped by family then
    harmonic (cos, t*cos, sin, t*sin; harmonics minor, regions minor
    still), and finally residual scalings ordered region-major,
    period-minor.
    """

    n_regions: int
    n_periods: int
    n_harmonics: dict[str, int]
    components: tuple[str, ...] = COMPONENTS

    def component_dim(self, component: str) -> int:
        k = self.n_harmonics[component]
        return (2 + _SEASONAL_FAMILIES * k) * self.n_regions + self.n_periods * self.n_regions

    @property
    def n_total(self) -> int:
        return sum(self.component_dim(c) for c in self.components)

    def component_offset(self, component: str) -> int:
        off = 0
        for c in self.components:
            if c == component:
                return off
            off += self.component_dim(c)
        raise DecompositionError(f"unknown component {component!r}")

    def component_slice(self, component: str) -> slice:
        off = self.component_offset(component)
        return slice(off, off + self.component_dim(component))

    def index(self, component: str, family: int, region: int,
              harmonic: int | None = None, period: int | None = None) -> int:
        """Global index of one element; validates every coordinate."""
        r, q, k = self.n_regions, self.n_periods, self.n_harmonics[component]
        if not 1 <= region <= r:
            raise DecompositionError(f"region {region} out of range 1..{r}")
        off = self.component_offset(component)
        if family in (0, 1):
            return off + family * r + (region - 1)
        if 2 <= family <= 5:
            if harmonic is None or not 1 <= harmonic <= k:
                raise DecompositionError(f"harmonic {harmonic} out of range 1..{k}")
            block = (family - 2) * k + (harmonic - 1)
            return off + 2 * r + block * r + (region - 1)
        if family == 6:
            if period is None or not 1 <= period <= q:
                raise DecompositionError(f"period {period} out of range 1..{q}")
            return off + (2 + _SEASONAL_FAMILIES * k) * r + (region - 1) * q + (period - 1)
        raise DecompositionError(f"family {family} out of range 0..6")

    def describe(self, i: int) -> ElementKey:
        """Inverse of :meth:`index`."""
        if not 0 <= i < self.n_total:
            raise DecompositionError(f"element index {i} out of range")
        for c in self.components:
            dim = self.component_dim(c)
            off = self.component_offset(c)
            if not off <= i < off + dim:
                continue
            j = i - off
            r, q, k = self.n_regions, self.n_periods, self.n_harmonics[c]
            if j < 2 * r:
                return ElementKey(c, j // r, None, j % r + 1, None)
            j -= 2 * r
            if j < _SEASONAL_FAMILIES * k * r:
                block, region = divmod(j, r)
                fam, harm = divmod(block, k)
                return ElementKey(c, fam + 2, harm + 1, region + 1, None)
            j -= _SEASONAL_FAMILIES * k * r
            region, period = divmod(j, q)
            return ElementKey(c, 6, None, region + 1, period + 1)
        raise DecompositionError("unreachable")

    def descriptor(self) -> str:
        """Stable one-line description of the layout (used in file headers)."""
        ks = ",".join(f"{c}:{self.n_harmonics[c]}" for c in self.components)
        return f"components={'|'.join(self.components)};R={self.n_regions};Q={self.n_periods};K={ks}"

    def labels(self) -> list[str]:
        out = []
        for i in range(self.n_total):
            c, fam, k, r, q = self.describe(i)
            parts = [c, f"j{fam}"]
            if k is not None:
                parts.append(f"k{k}")
            parts.append(f"r{r}")
            if q is not None:
                parts.append(f"q{q}")
            out.append("_".join(parts))
        return out


def _time_factor(family: int, harmonic: int | None, times: FloatArray, period: float) -> FloatArray:
    if family == 0:
        return np.ones_like(times)
    if family == 1:
        return times.astype(float)
    w = 2.0 * np.pi * harmonic / period
    if family == 2:
        return np.cos(w * times)
    if family == 3:
        return times * np.cos(w * times)
    if family == 4:
        return np.sin(w * times)
    if family == 5:
        return times * np.sin(w * times)
    raise DecompositionError(f"family {family} has no closed-form time factor")


class FluxBasisSet:
    """Scaling basis for all components over one study interval.

    The flux of component ``c`` under coefficients ``alpha`` is

        x_c(s, t) = x0_c(s, t) + phi_c(s, t)' alpha_c

    where the basis functions ``phi_c`` scale the fitted coefficient
    fields region by region (the residual field region by region and
    period by period), so summing each component's block against a
    vector of ones reproduces the bottom-up flux.
    """

    def __init__(
        self,
        grid: SpatialGrid,
        partition: RegionPartition,
        periods: TimePartition,
        fits: dict[str, HarmonicFit],
        bottomup: BottomUpFluxes,
        study_times: FloatArray | None = None,
    ) -> None:
        if partition.n_cells != grid.n_cells:
            raise DecompositionError("partition does not match grid")
        for c in COMPONENTS:
            if c not in fits:
                raise DecompositionError(f"missing harmonic fit for component {c!r}")
            if fits[c].n_cells != grid.n_cells:
                raise DecompositionError(f"fit for {c!r} does not match grid")
        self.grid = grid
        self.partition = partition
        self.periods = periods
        self.fits = fits
        self.bottomup = bottomup
        self.layout = AlphaLayout(
            n_regions=partition.n_regions,
            n_periods=periods.n_periods,
            n_harmonics={c: fits[c].n_harmonics for c in COMPONENTS},
        )
        if study_times is None:
            sel = (bottomup.times >= periods.start) & (bottomup.times <= periods.end)
            study_times = bottomup.times[sel]
        self.study_times = np.asarray(study_times, dtype=float)
        if self.study_times.size == 0:
            raise DecompositionError("no native times fall inside the study interval")
        self.study_periods = periods.period_of(self.study_times)
        # residual fields restricted to the study interval
        self.study_residual = {c: fits[c].residual_at(self.study_times) for c in COMPONENTS}
        self._region_cells = [partition.cells_in(r) for r in range(1, partition.n_regions + 1)]
        self._build_separable()

    # -- layout plumbing ------------------------------------------------

    @property
    def n_alpha(self) -> int:
        return self.layout.n_total

    def content_hash(self) -> str:
        """Hash of everything the response matrix depends on."""
        import hashlib

        h = hashlib.sha256()
        h.update(self.layout.descriptor().encode())
        for arr in (self.grid.area, self.partition.region_id.astype(float),
                    self.periods.boundaries, self.study_times, self.separable_patterns):
            h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
        for c in self.layout.components:
            h.update(np.ascontiguousarray(self.study_residual[c]).tobytes())
        return h.hexdigest()

    def _build_separable(self) -> None:
        """Precompute spatial patterns for the non-residual elements."""
        lay = self.layout
        n_sep = sum(
            (2 + _SEASONAL_FAMILIES * lay.n_harmonics[c]) * lay.n_regions for c in lay.components
        )
        patterns = np.zeros((self.grid.n_cells, n_sep))
        keys: list[ElementKey] = []
        global_idx = np.empty(n_sep, dtype=np.int64)
        col = 0
        for c in lay.components:
            fit = self.fits[c]
            fams: list[tuple[int, int | None]] = [(0, None), (1, None)]
            fams += [(j, k) for j in (2, 3, 4, 5) for k in range(1, lay.n_harmonics[c] + 1)]
            for fam, harm in fams:
                coef = fit.coefficient(fam, harm)
                for r in range(1, lay.n_regions + 1):
                    cells = self._region_cells[r - 1]
                    patterns[cells, col] = coef[cells]
                    keys.append(ElementKey(c, fam, harm, r, None))
                    global_idx[col] = lay.index(c, fam, r, harmonic=harm)
                    col += 1
        self.separable_patterns = patterns
        self.separable_keys = keys
        self.separable_global_idx = global_idx

    def separable_time_factors(self, t: float | FloatArray) -> FloatArray:
        """Time factor of every separable element at time(s) t."""
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(self.separable_keys), tt.size))
        for i, key in enumerate(self.separable_keys):
            out[i] = _time_factor(key.family, key.harmonic, tt, self.fits[key.component].period)
        return out if np.ndim(t) else out[:, 0]

    # -- pointwise evaluation -------------------------------------------

    def phi_row(self, cell: int, t: float) -> FloatArray:
        """Dense basis row phi(s, t) over the full coefficient vector."""
        cell = self.grid.check_cell(cell)
        lay = self.layout
        row = np.zeros(lay.n_total)
        r = int(self.partition.region_id[cell])
        q = int(self.periods.period_of(t)) if self.periods.start <= t <= self.periods.end else None
        for c in lay.components:
            fit = self.fits[c]
            row[lay.index(c, 0, r)] = fit.coefficient(0)[cell]
            row[lay.index(c, 1, r)] = fit.coefficient(1)[cell] * t
            w = 2.0 * np.pi / fit.period
            for k in range(1, lay.n_harmonics[c] + 1):
                ct, st = np.cos(w * k * t), np.sin(w * k * t)
                row[lay.index(c, 2, r, harmonic=k)] = fit.coefficient(2, k)[cell] * ct
                row[lay.index(c, 3, r, harmonic=k)] = fit.coefficient(3, k)[cell] * t * ct
                row[lay.index(c, 4, r, harmonic=k)] = fit.coefficient(4, k)[cell] * st
                row[lay.index(c, 5, r, harmonic=k)] = fit.coefficient(5, k)[cell] * t * st
            if q is not None:
                resid = fit.residual_at(np.array([t]))[cell, 0]
                row[lay.index(c, 6, r, period=q)] = resid
        return row

    def component_flux(self, component: str, alpha_c: FloatArray, times: npt.ArrayLike) -> FloatArray:
        """Flux field (n_cells, n_times) of one component under alpha_c.

        Times must lie inside the study interval (the residual scalings
        are only defined there).
        """
        lay = self.layout
        alpha_c = np.asarray(alpha_c, dtype=float)
        if alpha_c.shape != (lay.component_dim(component),):
            raise DecompositionError(f"alpha for {component!r} has wrong length")
        tt = np.atleast_1d(np.asarray(times, dtype=float))
        fit = self.fits[component]
        resid = fit.residual_at(tt)
        out = fit.evaluate(tt) + resid
        off = lay.component_offset(component)
        factors = self.separable_time_factors(tt)
        for col, key in enumerate(self.separable_keys):
            if key.component != component:
                continue
            a = alpha_c[self.separable_global_idx[col] - off]
            if a == 0.0:
                continue
            cells = self._region_cells[key.region - 1]
            out[np.ix_(cells, np.arange(tt.size))] += a * np.outer(
                self.separable_patterns[cells, col], factors[col]
            )
        qq = self.periods.period_of(tt)
        for r in range(1, lay.n_regions + 1):
            cells = self._region_cells[r - 1]
            cols = [lay.index(component, 6, r, period=int(q)) - off for q in qq]
            out[np.ix_(cells, np.arange(tt.size))] += resid[cells] * alpha_c[cols][None, :]
        return out

    # -- aggregation ----------------------------------------------------

    def x0_aggregates(self, component: str) -> FloatArray:
        """Bottom-up flux aggregated to (region, period) means, kg s^-1.

        Entry ``(r-1) * Q + (q-1)`` is the period-mean, area-weighted
        total of the bottom-up component over region r.
        """
        lay = self.layout
        fit = self.fits[component]
        vals = fit.evaluate(self.study_times) + self.study_residual[component]
        out = np.zeros(lay.n_regions * lay.n_periods)
        weighted = vals * self.grid.area[:, None]
        for r in range(1, lay.n_regions + 1):
            cells = self._region_cells[r - 1]
            totals = weighted[cells].sum(axis=0)
            for q in range(1, lay.n_periods + 1):
                mask = self.study_periods == q
                out[(r - 1) * lay.n_periods + (q - 1)] = totals[mask].mean()
        return out

    def aggregation_matrix(self, component: str) -> FloatArray:
        """Map from alpha_c to (region, period) mean flux adjustments.

        Row ``(r-1) * Q + (q-1)`` applied to ``alpha_c`` gives the
        period-mean, area-weighted basis contribution in region r, in
        kg s^-1, matching :meth:`x0_aggregates`.
        """
        lay = self.layout
        dim = lay.component_dim(component)
        out = np.zeros((lay.n_regions * lay.n_periods, dim))
        off = lay.component_offset(component)
        area = self.grid.area
        # separable part: pattern(s) * g(t) -> area sum per region, time mean per period
        factors = self.separable_time_factors(self.study_times)  # (n_sep, n_study)
        for col, key in enumerate(self.separable_keys):
            if key.component != component:
                continue
            cells = self._region_cells[key.region - 1]
            total = float(np.dot(area[cells], self.separable_patterns[cells, col]))
            g = factors[col]
            for q in range(1, lay.n_periods + 1):
                mask = self.study_periods == q
                row = (key.region - 1) * lay.n_periods + (q - 1)
                out[row, self.separable_global_idx[col] - off] = total * g[mask].mean()
        resid = self.study_residual[component]
        weighted = resid * area[:, None]
        for r in range(1, lay.n_regions + 1):
            cells = self._region_cells[r - 1]
            totals = weighted[cells].sum(axis=0)
            for q in range(1, lay.n_periods + 1):
                mask = self.study_periods == q
                row = (r - 1) * lay.n_periods + (q - 1)
                col_idx = lay.index(component, 6, r, period=q) - off
                # residual element is only supported inside its own period
                out[row, col_idx] = totals[mask].sum() / mask.sum()
        return out

    def linear_aggregates(self, component: str) -> tuple[FloatArray, FloatArray]:
        """Region totals of the intercept and trend fields (kg s^-1, kg s^-1 d^-1)."""
        fit = self.fits[component]
        b0 = np.empty(self.layout.n_regions)
        b1 = np.empty(self.layout.n_regions)
        for r in range(1, self.layout.n_regions + 1):
            cells = self._region_cells[r - 1]
            b0[r - 1] = float(np.dot(self.grid.area[cells], fit.coefficient(0)[cells]))
            b1[r - 1] = float(np.dot(self.grid.area[cells], fit.coefficient(1)[cells]))
        return b0, b1


def build_basis(
    grid: SpatialGrid,
    partition: RegionPartition,
    periods: TimePartition,
    bottomup: BottomUpFluxes,
    n_harmonics: dict[str, int],
) -> FluxBasisSet:
    """Fit all components and assemble the scaling basis."""
    fits = fit_components(bottomup, n_harmonics)
    return FluxBasisSet(grid=grid, partition=partition, periods=periods, fits=fits, bottomup=bottomup)
