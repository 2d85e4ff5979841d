"""Observing-system simulation experiments on a desk-scale world.

Builds a small synthetic globe (two hemispheric land bands plus a
tropical band and one ocean region), fits the flux decomposition and
the SIF-GPP link on its bottom-up fields, assembles transport and SIF
responses for a fixed observation geometry, and then drives the full
protocol: four true-flux cases x four inversion setups, with simulated
observations, two-stage inference, and aggregate scoring.

The tropical band plays the role of the region where the SIF relation
is strongly nonlinear: its link fits fail the linearity screen, so SIF
carries no information there and its respiration linear terms stay
fixed even in the otherwise-inferred setups.
"""

from __future__ import annotations

import dataclasses
import json
import os
import zlib
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import numpy.typing as npt

from .data_model import ErrorParams, ObservationGroup, simulate_observations, write_observations
from .decomposition import BottomUpFluxes, FluxBasisSet, build_basis
from .evaluation import QUANTITIES, QuantityScore, score_quantity, write_scores
from .grid import RegionPartition, SpatialGrid, make_regular_grid, month_boundaries, month_of_year
from .prior import AlphaPrior, ConstraintSet, FixedTermPolicy, Hyperpriors, build_constraints
from .samplers import (
    GibbsConfig, InversionModel, PosteriorSamples, run_gibbs, save_samples,
)
from .sif_link import SifBaseline, SifLinkModel, SifPairs, fit_sif_link
from .transport import (
    AveragingFunctional, ToyTransport, ToyTransportConfig, ToyTransportOperator,
    cached_response_matrix,
)

FloatArray = npt.NDArray[np.float64]

SECONDS_PER_DAY = 86400.0


class OsseError(RuntimeError):
    """Raised when the experiment protocol cannot be carried out."""


def substream(seed: int, *names: str) -> np.random.Generator:
    """Named, order-independent child stream of one master seed."""
    key = tuple(zlib.crc32(n.encode()) for n in names)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


# -- world configuration ---------------------------------------------------


@dataclass(frozen=True)
class DeskWorldConfig:
    """Everything that defines the synthetic world and its observations."""

    nlat: int = 8
    nlon: int = 10
    epoch: str = "2013-01-01"
    record_months: int = 48
    study_start_month: int = 24
    study_months: int = 24
    harmonics: dict[str, int] = field(default_factory=lambda: {"gpp": 3, "resp": 3, "ocean": 2})
    nonlinear_region: int = 2  # land band with a cubic SIF response
    seed: int = 20260817  # world texture: fields, link noise, geometry

    surface_every_days: float = 3.0
    surface_sd_ppm: float = 0.15
    insitu_ell_truth_days: float = 0.6

    xco2_every_days: float = 3.0
    xco2_per_cluster: int = 3
    xco2_spacing_seconds: float = 40.0
    xco2_sd_ppm: float = 0.4
    xco2_rho_truth: float = 0.45
    xco2_ell_truth_seconds: float = 50.0

    sif_every_days: float = 3.0
    sif_per_visit: int = 3
    sif_spacing_seconds: float = 45.0
    sif_sd: float = 0.10
    sif_rho_truth: float = 0.35
    sif_ell_truth_seconds: float = 60.0
    sif_training_sd: float = 0.08

    delta: float = 0.1  # fractional GPP shift of the shift cases
    transport: ToyTransportConfig = field(default_factory=ToyTransportConfig)

    def __post_init__(self) -> None:
        for name in ("nlat", "nlon", "record_months", "study_start_month",
                     "study_months", "nonlinear_region", "seed",
                     "xco2_per_cluster", "sif_per_visit"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise OsseError(f"world `{name}` must be a non-negative integer")
        if self.nlat < 4 or self.nlon < 4:
            raise OsseError("the world grid needs at least 4x4 cells")
        if self.study_months < 1:
            raise OsseError("the study window must cover at least one month")
        for name in ("surface_every_days", "surface_sd_ppm", "insitu_ell_truth_days",
                     "xco2_every_days", "xco2_spacing_seconds", "xco2_sd_ppm",
                     "xco2_ell_truth_seconds", "sif_every_days", "sif_spacing_seconds",
                     "sif_sd", "sif_ell_truth_seconds", "sif_training_sd", "delta"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v <= 0:
                raise OsseError(f"world `{name}` must be a positive number")
        if not 0.0 <= self.xco2_rho_truth < 1.0 or not 0.0 <= self.sif_rho_truth < 1.0:
            raise OsseError("truth error correlations must sit in [0, 1)")
        if not isinstance(self.harmonics, dict) or not all(
                isinstance(k, int) and not isinstance(k, bool) and k >= 1
                for k in self.harmonics.values()):
            raise OsseError("world `harmonics` must map components to counts >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["transport"] = self.transport.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DeskWorldConfig:
        d = dict(d)
        if "transport" in d and not isinstance(d["transport"], ToyTransportConfig):
            tr = dict(d["transport"])
            tr["column_air_kg_m2"] = tr.get("column_air_kg_m2",
                                            ToyTransportConfig().column_air_kg_m2)
            d["transport"] = ToyTransportConfig(**tr)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise OsseError(f"unknown world config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DeskWorld:
    """Built world: grid, basis, link, geometry, and attached responses."""

    config: DeskWorldConfig
    grid: SpatialGrid
    partition: RegionPartition
    basis: FluxBasisSet
    link: SifLinkModel
    constraints: ConstraintSet
    groups: dict[str, ObservationGroup]  # geometry + responses; values are zeros
    truth_error_params: dict[str, ErrorParams]
    reference: FloatArray  # stand-in posterior-mean coefficients (full layout)

    @property
    def nonlinear_region(self) -> int:
        return self.config.nonlinear_region


# -- synthetic fields -------------------------------------------------------


def _land_labels(nlat: int, nlon: int) -> npt.NDArray[np.int64]:
    """Region ids: 1 northern band, 2 tropical band, 3 southern band, 4 ocean."""
    labels = np.full((nlat, nlon), 4, dtype=np.int64)

    def rows(a: float, b: float) -> slice:
        return slice(int(round(a * nlat)), int(round(b * nlat)))

    def cols(a: float, b: float) -> slice:
        return slice(int(round(a * nlon)), int(round(b * nlon)))

    labels[rows(5 / 8, 7 / 8), cols(1 / 10, 5 / 10)] = 1
    labels[rows(3 / 8, 5 / 8), cols(5 / 10, 8 / 10)] = 2
    labels[rows(2 / 8, 3 / 8), cols(2 / 10, 5 / 10)] = 3
    return labels.ravel()


def _smooth_noise(rng: np.random.Generator, shape: tuple[int, int], sd: float,
                  window: int = 9) -> FloatArray:
    """Temporally smoothed weather-like noise with the requested sd."""
    raw = rng.standard_normal(shape)
    kernel = np.ones(window) / window
    sm = np.apply_along_axis(lambda v: np.convolve(v, kernel, mode="same"), 1, raw)
    sm *= sd / float(np.std(sm))
    return np.clip(sm, -3.0 * sd, 3.0 * sd)


def _build_fields(cfg: DeskWorldConfig, grid: SpatialGrid, labels: npt.NDArray[np.int64],
                  native: FloatArray, rng: np.random.Generator) -> BottomUpFluxes:
    """Bottom-up GPP / respiration / ocean fields on the native daily grid.

    GPP is strictly negative and respiration strictly positive on land;
    both carry seasonality, a slow trend, and smoothed weather noise so
    the harmonic fit leaves a meaningful residual.
    """
    n_cells = grid.n_cells
    t_yr = native / 365.25
    land = labels != int(labels.max())
    region_amp = {1: 1.0, 2: 1.0, 3: 0.7}
    # the tropical band is productive year-round with weak seasonality
    season_amp = {1: 0.8, 2: 0.15, 3: 0.8}
    amp = np.where(land, [region_amp.get(int(r), 1.0) for r in labels], 0.0)
    s_amp = np.where(land, [season_amp.get(int(r), 0.8) for r in labels], 0.0)
    texture = 0.8 + 0.4 * rng.random(n_cells)
    phase = np.where(grid.lat < 0.0, np.pi, 0.0)  # southern summer in December

    season = 1.0 + s_amp[:, None] * np.cos(2.0 * np.pi * t_yr[None, :] + phase[:, None])
    trend = 1.0 + 0.05 * t_yr
    w_gpp = _smooth_noise(rng, (n_cells, native.size), 0.18)
    gpp = -1.0e-7 * (amp * texture)[:, None] * np.maximum(0.15, season * trend[None, :] + w_gpp)
    gpp[~land] = 0.0

    season_r = 1.0 + 0.6 * s_amp[:, None] * np.cos(2.0 * np.pi * t_yr[None, :] + phase[:, None] + 0.6)
    trend_r = 1.0 + 0.03 * t_yr
    texture_r = 0.8 + 0.4 * rng.random(n_cells)
    w_resp = _smooth_noise(rng, (n_cells, native.size), 0.12)
    resp = 0.8e-7 * (amp * texture_r)[:, None] * np.maximum(0.15, season_r * trend_r[None, :] + w_resp)
    resp[~land] = 0.0

    w_oc = _smooth_noise(rng, (n_cells, native.size), 0.2)
    ocean = 1.0e-8 * (-0.4 + 0.3 * np.sin(2.0 * np.pi * t_yr[None, :] + np.deg2rad(grid.lon)[:, None])
                      + w_oc)
    ocean[land] = 0.0
    return BottomUpFluxes(times=native, fields={"gpp": gpp, "resp": resp, "ocean": ocean})


def _build_sif_truth(cfg: DeskWorldConfig, grid: SpatialGrid, labels: npt.NDArray[np.int64],
                     bottomup: BottomUpFluxes, rng: np.random.Generator) -> FloatArray:
    """Noise-free SIF field: linear in GPP except the nonlinear band.

    The nonlinear band gets a strong cubic term, which is what the
    linearity screen is meant to catch.
    """
    land = labels != int(labels.max())
    slope = -(0.9 + 0.3 * rng.random(grid.n_cells)) * 1.0e7
    offset = 0.15 + 0.1 * rng.random(grid.n_cells)
    gn = bottomup.fields["gpp"] * 1.0e7  # order-one negative values on land
    sif = offset[:, None] + slope[:, None] * 1.0e-7 * gn
    cubic = labels == cfg.nonlinear_region
    sif[cubic] = offset[cubic, None] - 1.1 * gn[cubic] + 2.5 * gn[cubic] ** 3
    sif[~land] = 0.0
    return sif


# -- stand-in posterior-mean coefficients -----------------------------------

_REFERENCE_RESOURCE = "reference_alpha.csv"


def draw_reference_alpha(basis: FluxBasisSet, nonlinear_region: int,
                         rng: np.random.Generator) -> FloatArray:
    """Moderate synthetic coefficient vector standing in for a previous
    system's posterior mean.

    Scales are kept well inside the sign-constraint margins so the
    shift cases built on top of it remain feasible: linear terms a few
    percent, seasonal around ten percent, residuals around five.
    """
    lay = basis.layout
    ocean_regions = set(basis.partition.ocean_region_ids())
    alpha = np.zeros(lay.n_total)
    for i in range(lay.n_total):
        comp, fam, _, r, _ = lay.describe(i)
        if comp == "ocean" and fam != 6:
            continue  # never adjusted
        if comp != "ocean" and r in ocean_regions and fam != 6:
            continue
        if comp == "resp" and fam in (0, 1) and r == nonlinear_region:
            continue  # always-fixed respiration linear terms
        if fam in (0, 1):
            alpha[i] = rng.normal(0.0, 0.08)
        elif fam == 6:
            alpha[i] = rng.normal(0.0, 0.05)
        else:
            alpha[i] = rng.normal(0.0, 0.10)
    return alpha


def _reference_from_text(text: str, descriptor: str) -> FloatArray | None:
    lines = text.strip().splitlines()
    if not lines or lines[0] != f"# layout: {descriptor}":
        return None
    return np.array([float(line) for line in lines[1:]])


def reference_alpha(basis: FluxBasisSet, nonlinear_region: int,
                    fixture_path: str | None = None) -> FloatArray:
    """Frozen stand-in coefficients, or a deterministic draw as fallback.

    The packaged fixture is used when its layout descriptor matches the
    basis; other layouts regenerate deterministically from the basis
    content hash so reruns stay reproducible.
    """
    descriptor = basis.layout.descriptor()
    text: str | None = None
    if fixture_path is not None:
        with open(fixture_path) as fh:
            text = fh.read()
    else:
        ref = resources.files("fluxinv").joinpath("data").joinpath(_REFERENCE_RESOURCE)
        if ref.is_file():
            text = ref.read_text()
    if text is not None:
        arr = _reference_from_text(text, descriptor)
        if arr is not None:
            if arr.size != basis.layout.n_total:
                raise OsseError("reference coefficient fixture has the wrong length")
            return arr
    seed = int(basis.content_hash()[:8], 16)
    return draw_reference_alpha(basis, nonlinear_region, substream(seed, "reference"))


def format_reference_alpha(basis: FluxBasisSet, alpha: FloatArray) -> str:
    lines = [f"# layout: {basis.layout.descriptor()}"]
    lines.extend(format(v, ".17g") for v in alpha)
    return "\n".join(lines) + "\n"


# -- true-flux cases ---------------------------------------------------------


CASE_TAGS = ("bottomup", "reference", "shift-up", "shift-down")


@dataclass(frozen=True)
class TrueFluxCase:
    """One synthetic truth: a tag, its coefficients, and how it was shifted."""

    tag: str
    alpha_true: FloatArray
    delta: float = 0.0
    exempt_regions: tuple[int, ...] = ()


def build_true_flux(tag: str, basis: FluxBasisSet, reference: FloatArray,
                    delta: float = 0.1,
                    exempt_regions: tuple[int, ...] = ()) -> TrueFluxCase:
    """Construct one true-flux case.

    The shift cases move the GPP linear terms by a fraction ``delta``
    and counter-move the respiration linear terms by the bottom-up
    aggregate ratio, so every region's net land exchange keeps its
    linear aggregates exactly.
    """
    lay = basis.layout
    if tag == "bottomup":
        return TrueFluxCase(tag=tag, alpha_true=np.zeros(lay.n_total))
    if tag == "reference":
        return TrueFluxCase(tag=tag, alpha_true=np.asarray(reference, dtype=float).copy())
    if tag not in ("shift-up", "shift-down"):
        raise OsseError(f"unknown true-flux case {tag!r}")
    sgn = 1.0 if tag == "shift-up" else -1.0
    d = sgn * float(delta)
    alpha = np.asarray(reference, dtype=float).copy()
    agg_gpp = basis.linear_aggregates("gpp")
    agg_resp = basis.linear_aggregates("resp")
    for r in basis.partition.land_region_ids():
        if r in exempt_regions:
            continue
        for j in (0, 1):
            bg = agg_gpp[j][r - 1]
            br = agg_resp[j][r - 1]
            if br == 0.0:
                raise OsseError(
                    f"region {r} has a zero respiration aggregate for linear term {j}; "
                    "cannot build a net-exchange-preserving shift"
                )
            alpha[lay.index("gpp", j, r)] += d
            alpha[lay.index("resp", j, r)] -= d * bg / br
    return TrueFluxCase(tag=tag, alpha_true=alpha, delta=d, exempt_regions=tuple(exempt_regions))


def standard_cases(world: DeskWorld) -> list[TrueFluxCase]:
    exempt = (world.nonlinear_region,)
    return [
        build_true_flux("bottomup", world.basis, world.reference),
        build_true_flux("reference", world.basis, world.reference),
        build_true_flux("shift-up", world.basis, world.reference,
                        delta=world.config.delta, exempt_regions=exempt),
        build_true_flux("shift-down", world.basis, world.reference,
                        delta=world.config.delta, exempt_regions=exempt),
    ]


# -- observation geometry ----------------------------------------------------


def _cluster_times(start: float, end: float, every: float, count: int,
                   spacing_seconds: float, offset: float) -> tuple[FloatArray, npt.NDArray[np.int64]]:
    """Times and series ids for short retrieval bursts every few days."""
    days = np.arange(start + offset, end - 1.0, every)
    within = np.arange(count) * (spacing_seconds / SECONDS_PER_DAY)
    times = (days[:, None] + within[None, :]).ravel()
    series = np.repeat(np.arange(days.size, dtype=np.int64), count)
    return times, series


def _site_cells(labels: npt.NDArray[np.int64], nlat: int, nlon: int) -> list[int]:
    """Three fixed monitoring cells: two near land bands, one remote ocean."""

    def cell(frow: float, fcol: float) -> int:
        return int(round(frow * nlat)) * nlon + int(round(fcol * nlon))

    return [cell(5 / 8, 2 / 10), cell(4 / 8, 8 / 10), cell(2 / 8, 6 / 10)]


def _track_cells(labels: npt.NDArray[np.int64], nlat: int, nlon: int) -> list[int]:
    """A fixed sweep of cells covering most latitude rows."""
    cells = []
    for i, row in enumerate(range(1, nlat - 1)):
        for col in ((2 * i) % nlon, (2 * i + 5) % nlon):
            cells.append(row * nlon + col)
    return cells


def build_desk_world(config: DeskWorldConfig | None = None,
                     cache_dir: str | None = None,
                     labels: npt.NDArray[np.int64] | None = None,
                     basis: FluxBasisSet | None = None) -> DeskWorld:
    """Assemble the synthetic world and attach all response matrices.

    ``labels`` replaces the built-in region map (one id per cell, with
    the highest id taken as ocean); ``basis`` skips the harmonic refit
    and must have been built from this exact world.
    """
    cfg = config or DeskWorldConfig()
    if labels is None:
        labels = _land_labels(cfg.nlat, cfg.nlon)
    else:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (cfg.nlat * cfg.nlon,):
            raise OsseError(f"region map has {labels.size} cells, "
                            f"the world needs {cfg.nlat * cfg.nlon}")
    ocean_id = int(labels.max())
    grid = make_regular_grid(cfg.nlat, cfg.nlon,
                             land_fraction=(labels != ocean_id).astype(float))
    partition = RegionPartition.from_labels(labels, grid)
    periods = month_boundaries(cfg.epoch, cfg.study_start_month, cfg.study_months)
    record_end = month_boundaries(cfg.epoch, 0, cfg.record_months).end
    if periods.end > record_end:
        raise OsseError("study window extends beyond the flux record")
    native = np.arange(0.0, periods.end + 1.0)

    rng = substream(cfg.seed, "world", "fields")
    bottomup = _build_fields(cfg, grid, labels, native, rng)
    if basis is None:
        basis = build_basis(grid, partition, periods, bottomup, dict(cfg.harmonics))
    else:
        for name, fresh in bottomup.fields.items():
            if not np.array_equal(basis.bottomup.fields.get(name), fresh):
                raise OsseError("supplied basis was built from a different world")
    constraints = build_constraints(basis)

    # SIF link: trained on the full record against noisy truth SIF
    sif_truth = _build_sif_truth(cfg, grid, labels, bottomup,
                                 substream(cfg.seed, "world", "sif"))
    land_cells = np.nonzero(labels != ocean_id)[0]
    n_t = native.size
    pair_cells = np.repeat(land_cells, n_t)
    pair_times = np.tile(native, land_cells.size)
    train_noise = substream(cfg.seed, "world", "sif-train").normal(
        0.0, cfg.sif_training_sd, pair_cells.size)
    pairs = SifPairs(cell=pair_cells, time=pair_times,
                     gpp=bottomup.fields["gpp"][land_cells].ravel(),
                     sif=sif_truth[land_cells].ravel() + train_noise)
    link = fit_sif_link(pairs, cfg.epoch)
    _check_link_coverage(link, labels, cfg.nonlinear_region)

    # linearized SIF baseline on study times (zero where screened out)
    study = basis.study_times
    x0_gpp = basis.fits["gpp"].evaluate(study) + basis.study_residual["gpp"]
    base_vals = np.zeros((grid.n_cells, study.size))
    for c in land_cells:
        for j, t in enumerate(study):
            rec = link.record(int(c), float(t))
            if rec is not None and rec.valid:
                base_vals[c, j] = rec.slope * x0_gpp[c, j] + rec.intercept
    link.baseline = SifBaseline(times=study, values=base_vals)

    groups, truth_params = _build_observations(cfg, grid, labels, basis, link, cache_dir)
    reference = reference_alpha(basis, cfg.nonlinear_region)
    world = DeskWorld(config=cfg, grid=grid, partition=partition, basis=basis, link=link,
                      constraints=constraints, groups=groups,
                      truth_error_params=truth_params, reference=reference)
    _check_cases_feasible(world)
    return world


def _check_link_coverage(link: SifLinkModel, labels: npt.NDArray[np.int64],
                         nonlinear_region: int) -> None:
    valid_by_region: dict[int, int] = {}
    for (cell, _), rec in link.records.items():
        if rec.valid:
            r = int(labels[cell])
            valid_by_region[r] = valid_by_region.get(r, 0) + 1
    if valid_by_region.get(nonlinear_region, 0) != 0:
        raise OsseError("the nonlinear band has cell-months that passed the linearity screen")
    ocean_id = int(labels.max())
    linear_land = {int(r) for r in np.unique(labels) if r != ocean_id and r != nonlinear_region}
    missing = [r for r in sorted(linear_land) if valid_by_region.get(r, 0) < 8]
    if missing:
        raise OsseError(f"SIF link coverage is too thin in land regions {missing}")


def _build_observations(
    cfg: DeskWorldConfig,
    grid: SpatialGrid,
    labels: npt.NDArray[np.int64],
    basis: FluxBasisSet,
    link: SifLinkModel,
    cache_dir: str | None,
) -> tuple[dict[str, ObservationGroup], dict[str, ErrorParams]]:
    periods = basis.periods
    t0, t1 = periods.start, periods.end
    functional = AveragingFunctional()

    # surface sites: one value every few days, series chunked by month
    sites = _site_cells(labels, cfg.nlat, cfg.nlon)
    s_times, s_cells, s_series = [], [], []
    for k, cell in enumerate(sites):
        tt = np.arange(t0 + 0.7 + 0.31 * k, t1 - 1.0, cfg.surface_every_days)
        s_times.append(tt)
        s_cells.append(np.full(tt.size, cell, dtype=np.int64))
        s_series.append(k * 1000 + periods.period_of(tt))
    surf_times = np.concatenate(s_times)
    surf_cells = np.concatenate(s_cells)
    surf_series = np.concatenate(s_series).astype(np.int64)

    # satellite mole-fraction bursts along a fixed track
    x_times, x_series = _cluster_times(t0, t1, cfg.xco2_every_days,
                                       cfg.xco2_per_cluster, cfg.xco2_spacing_seconds, 0.5)
    track = _track_cells(labels, cfg.nlat, cfg.nlon)
    n_clusters = x_series.max() + 1
    cluster_cells = np.array([track[k % len(track)] for k in range(n_clusters)], dtype=np.int64)
    x_cells = cluster_cells[x_series]

    # SIF bursts visit valid (cell, month) combinations in rotation
    f_times, f_series = _cluster_times(t0, t1, cfg.sif_every_days,
                                       cfg.sif_per_visit, cfg.sif_spacing_seconds, 0.4)
    valid_by_month: dict[int, list[int]] = {}
    for (cell, month), rec in sorted(link.records.items()):
        if rec.valid:
            valid_by_month.setdefault(month, []).append(cell)
    f_cells = np.empty(f_times.size, dtype=np.int64)
    visit_counter: dict[int, int] = {}
    keep = np.ones(f_times.size, dtype=bool)
    for s in range(f_series.max() + 1):
        idx = np.nonzero(f_series == s)[0]
        month = int(_month_of(periods.epoch, float(f_times[idx[0]])))
        cells = valid_by_month.get(month)
        if not cells:
            keep[idx] = False
            continue
        k = visit_counter.get(month, 0)
        visit_counter[month] = k + 1
        f_cells[idx] = cells[k % len(cells)]
    f_times, f_series, f_cells = f_times[keep], f_series[keep], f_cells[keep]
    if f_times.size == 0:
        raise OsseError("no valid cell-months available for SIF observations")
    mse = np.array([link.model_error_variance(int(c), float(t))
                    for c, t in zip(f_cells, f_times)])
    sif_budgets = cfg.sif_sd**2 + mse

    # transport responses for the two mole-fraction groups in one pass
    co2_cells = np.concatenate([surf_cells, x_cells])
    co2_times = np.concatenate([surf_times, x_times])
    op = ToyTransportOperator(ToyTransport(grid, cfg.transport))
    psi, z0 = cached_response_matrix(op, basis, co2_cells, co2_times, functional,
                                     cache_dir=cache_dir)
    n_s = surf_times.size

    sif_psi = np.array([link.sensitivity_row(basis, int(c), float(t))
                        for c, t in zip(f_cells, f_times)])
    sif_z0 = np.array([link.baseline.at(int(c), float(t))
                       for c, t in zip(f_cells, f_times)])

    groups = {
        "surface": ObservationGroup(
            name="surface", kind="insitu",
            values=np.zeros(n_s), budgets=np.full(n_s, cfg.surface_sd_ppm**2),
            series=surf_series, times=surf_times, cells=surf_cells,
            functional=functional, rho_fixed=True, estimate_correlation=True,
            response=psi[:n_s], baseline=z0[:n_s],
        ),
        "xco2": ObservationGroup(
            name="xco2", kind="satellite_co2",
            values=np.zeros(x_times.size), budgets=np.full(x_times.size, cfg.xco2_sd_ppm**2),
            series=x_series, times=x_times, cells=x_cells,
            functional=functional, estimate_correlation=True,
            response=psi[n_s:], baseline=z0[n_s:],
        ),
        "sif": ObservationGroup(
            name="sif", kind="satellite_sif",
            values=np.zeros(f_times.size), budgets=sif_budgets,
            series=f_series, times=f_times, cells=f_cells,
            functional=functional, estimate_correlation=True,
            response=sif_psi, baseline=sif_z0,
        ),
    }
    truth_params = {
        "surface": ErrorParams(gamma=1.0, rho=1.0, ell_days=cfg.insitu_ell_truth_days),
        "xco2": ErrorParams(gamma=1.0, rho=cfg.xco2_rho_truth,
                            ell_days=cfg.xco2_ell_truth_seconds / SECONDS_PER_DAY),
        "sif": ErrorParams(gamma=1.0, rho=cfg.sif_rho_truth,
                           ell_days=cfg.sif_ell_truth_seconds / SECONDS_PER_DAY),
    }
    return groups, truth_params


def _month_of(epoch: str, t: float) -> int:
    return int(month_of_year(t, epoch))


def _check_cases_feasible(world: DeskWorld) -> None:
    for case in standard_cases(world):
        bad = world.constraints.violations(case.alpha_true)
        if bad.size:
            raise OsseError(
                f"true-flux case {case.tag!r} violates {bad.size} sign constraints; "
                "moderate the reference coefficients or the shift"
            )


# -- simulated datasets -------------------------------------------------------


def simulate_case_dataset(world: DeskWorld, case: TrueFluxCase,
                          seed: int) -> dict[str, FloatArray]:
    """Observation values for one truth, seeded per (case, group)."""
    values: dict[str, FloatArray] = {}
    for name in sorted(world.groups):
        group = world.groups[name]
        response, baseline = group.require_response()
        mean = baseline + response @ case.alpha_true
        rng = substream(seed, "dataset", case.tag, name)
        values[name] = simulate_observations(group, mean, world.truth_error_params[name], rng)
    return values


# -- experiment grid ----------------------------------------------------------


@dataclass(frozen=True)
class InversionSetup:
    """One cell of the 2x2 design: SIF assimilation x respiration linear terms."""

    include_sif: bool
    rlt_inferred: bool

    @property
    def tag(self) -> str:
        sif = "sif" if self.include_sif else "nosif"
        rlt = "rltinf" if self.rlt_inferred else "rltfix"
        return f"{sif}-{rlt}"


def standard_setups() -> tuple[InversionSetup, ...]:
    return (
        InversionSetup(include_sif=True, rlt_inferred=True),
        InversionSetup(include_sif=True, rlt_inferred=False),
        InversionSetup(include_sif=False, rlt_inferred=True),
        InversionSetup(include_sif=False, rlt_inferred=False),
    )


@dataclass(frozen=True)
class SamplerBudget:
    """Iteration counts for the two inference stages."""

    stage1_iterations: int = 150
    stage1_warmup: int = 50
    iterations: int = 1000
    warmup: int = 200
    thin: int = 1


def _setup_policy(world: DeskWorld, setup: InversionSetup) -> FixedTermPolicy:
    return FixedTermPolicy(
        rlt_inferred=setup.rlt_inferred,
        rlt_always_fixed_regions=(world.nonlinear_region,),
    )


def _experiment_groups(world: DeskWorld, values: dict[str, FloatArray],
                       include_sif: bool) -> list[ObservationGroup]:
    groups = []
    for name in sorted(world.groups):
        g = world.groups[name]
        if not include_sif and g.kind == "satellite_sif":
            continue
        groups.append(dataclasses.replace(g, values=values[name]))
    return groups


def _initial_error_params(world: DeskWorld,
                          estimates: dict[str, tuple[float, float]] | None) -> dict[str, ErrorParams]:
    params = {}
    for name, g in world.groups.items():
        if estimates and name in estimates:
            rho, ell = estimates[name]
            params[name] = ErrorParams(gamma=1.0, rho=rho, ell_days=ell)
        elif g.kind == "insitu":
            params[name] = ErrorParams(gamma=1.0, rho=1.0, ell_days=1.0)
        else:
            params[name] = ErrorParams(gamma=1.0, rho=0.5, ell_days=60.0 / SECONDS_PER_DAY)
    return params


def estimate_error_correlations(world: DeskWorld, values: dict[str, FloatArray],
                                budget: SamplerBudget, seed: int,
                                case_tag: str,
                                hyper: Hyperpriors | None = None) -> dict[str, tuple[float, float]]:
    """First inference stage: posterior-mean (rho, ell) per learnable group.

    Runs once per dataset under the default setup (SIF on, respiration
    linear terms fixed); all setups of that dataset reuse the result.
    """
    prior = AlphaPrior(world.basis, _setup_policy(world, InversionSetup(True, False)))
    model = InversionModel(prior=prior, constraints=world.constraints,
                           groups=_experiment_groups(world, values, include_sif=True),
                           error_params=_initial_error_params(world, None),
                           hyper=hyper or Hyperpriors())
    cfg = GibbsConfig(n_iterations=budget.stage1_iterations, n_warmup=budget.stage1_warmup,
                      sample_correlation=True)
    stage1 = run_gibbs(model, cfg, substream(seed, "stage1", case_tag))
    return {
        name: (float(np.mean(stage1.rho[name])), float(np.mean(stage1.ell[name])))
        for name in stage1.rho
    }


@dataclass
class ExperimentResult:
    experiment_id: str
    case: TrueFluxCase
    setup: InversionSetup
    samples: PosteriorSamples
    scores: list[QuantityScore]


def run_experiment(world: DeskWorld, case: TrueFluxCase, values: dict[str, FloatArray],
                   setup: InversionSetup, budget: SamplerBudget, seed: int,
                   correlations: dict[str, tuple[float, float]] | None = None,
                   evaluation_periods: tuple[int, ...] | None = None,
                   policy: FixedTermPolicy | None = None,
                   hyper: Hyperpriors | None = None) -> ExperimentResult:
    """Invert one simulated dataset under one setup and score it."""
    prior = AlphaPrior(world.basis, policy or _setup_policy(world, setup))
    model = InversionModel(prior=prior, constraints=world.constraints,
                           groups=_experiment_groups(world, values, setup.include_sif),
                           error_params=_initial_error_params(world, correlations),
                           hyper=hyper or Hyperpriors())
    cfg = GibbsConfig(n_iterations=budget.iterations, n_warmup=budget.warmup,
                      thin=budget.thin, sample_correlation=False)
    samples = run_gibbs(model, cfg, substream(seed, "stage2", case.tag, setup.tag))
    alpha_full = samples.alpha_full(world.basis.layout.n_total)
    scores = [score_quantity(world.basis, alpha_full, case.alpha_true, q,
                             periods=evaluation_periods) for q in QUANTITIES]
    return ExperimentResult(
        experiment_id=f"{case.tag}_{setup.tag}",
        case=case, setup=setup, samples=samples, scores=scores,
    )


def run_osse_grid(world: DeskWorld, budget: SamplerBudget, seed: int,
                  out_dir: str | None = None,
                  cases: list[TrueFluxCase] | None = None,
                  setups: tuple[InversionSetup, ...] | None = None,
                  evaluation_periods: tuple[int, ...] | None = None,
                  hyper: Hyperpriors | None = None) -> list[ExperimentResult]:
    """Simulate, invert, and score every (case, setup) combination.

    With ``out_dir`` set, each experiment writes observations, samples,
    and scores under its own directory, and a combined report.csv lands
    at the top level.
    """
    cases = standard_cases(world) if cases is None else cases
    setups = standard_setups() if setups is None else setups
    results: list[ExperimentResult] = []
    score_rows: list[tuple[str, str, QuantityScore]] = []
    for case in cases:
        values = simulate_case_dataset(world, case, seed)
        correlations = estimate_error_correlations(world, values, budget, seed, case.tag,
                                                   hyper=hyper)
        for setup in setups:
            result = run_experiment(world, case, values, setup, budget, seed,
                                    correlations=correlations,
                                    evaluation_periods=evaluation_periods,
                                    hyper=hyper)
            results.append(result)
            for s in result.scores:
                score_rows.append((result.experiment_id, case.tag, s))
            if out_dir is not None:
                write_experiment(out_dir, world, result, values, setup)
    if out_dir is not None:
        write_scores(os.path.join(out_dir, "report.csv"), score_rows)
    return results


def write_experiment(out_dir: str, world: DeskWorld, result: ExperimentResult,
                      values: dict[str, FloatArray], setup: InversionSetup) -> None:
    exp_dir = os.path.join(out_dir, result.experiment_id)
    os.makedirs(exp_dir, exist_ok=True)
    write_observations(os.path.join(exp_dir, "observations.csv"),
                       _experiment_groups(world, values, setup.include_sif))
    save_samples(os.path.join(exp_dir, "samples.npz"), result.samples)
    write_scores(os.path.join(exp_dir, "scores.csv"),
                 [(result.experiment_id, result.case.tag, s) for s in result.scores])


def score_report_rows(results: list[ExperimentResult]) -> list[tuple[str, str, QuantityScore]]:
    rows = []
    for result in results:
        for s in result.scores:
            rows.append((result.experiment_id, result.case.tag, s))
    return rows


def write_manifest(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def rmse_by(results: list[ExperimentResult], quantity: str) -> dict[str, float]:
    """Convenience: experiment id -> RMSE for one quantity."""
    out = {}
    for r in results:
        for s in r.scores:
            if s.quantity == quantity:
                out[r.experiment_id] = s.rmse
    return out
