"""Transport operators: a toy Eulerian model and precomputed Jacobians.

The toy operator advects a single-level CO2 mole-fraction field on a
regular latitude-longitude grid with an upwind finite-volume scheme
plus explicit diffusion (periodic in longitude, no flux through the
poles).  It exists to turn surface fluxes into synthetic observations
with realistic causal structure, not to be a faithful atmosphere.
Because it is linear in the fluxes, the response of every basis element
can be computed in a single pass by evolving one tracer column per
element.

Real Jacobians produced elsewhere can be dropped in through a small
binary container; both operators expose the same interface.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, asdict

import numpy as np
import numpy.typing as npt

from .decomposition import FluxBasisSet
from .grid import EARTH_RADIUS_M, SpatialGrid

FloatArray = npt.NDArray[np.float64]

#: dry-air and CO2 molar masses (kg/mol) and a nominal air column (kg/m^2)
MOLAR_MASS_AIR = 28.964e-3
MOLAR_MASS_CO2 = 44.009e-3
COLUMN_AIR_KG_M2 = 1.033e4

JACOBIAN_MAGIC = b"FLUXJAC1"


class TransportError(ValueError):
    """Raised for unstable configurations or malformed Jacobian files."""


class CacheError(RuntimeError):
    """Raised when a cached response matrix is corrupt or mismatched."""


@dataclass(frozen=True)
class AveragingFunctional:
    """How an observation samples the mole-fraction field.

    ``window_days`` averages the field (uniform weights) over the
    native steps ending within the window before the observation time;
    zero takes the single step containing it.  ``column_weights`` are
    vertical weights; the toy model has one level, so the default is
    the identity weighting ``(1.0,)``.
    """

    window_days: float = 0.0
    column_weights: tuple[float, ...] = (1.0,)

    def __post_init__(self) -> None:
        if self.window_days < 0.0:
            raise TransportError("averaging window must be non-negative")
        if abs(sum(self.column_weights) - 1.0) > 1e-12:
            raise TransportError("column weights must sum to 1")


@dataclass(frozen=True)
class ToyTransportConfig:
    """Winds, mixing, and numerics for the toy operator.

    The zonal wind is solid-body (u0 * cos(lat)), which keeps the
    Courant number uniform across latitude bands; the meridional wind
    is a constant ``v0`` on interior faces (zero is the default and
    keeps a uniform field exactly uniform).
    """

    u0_m_s: float = 8.0
    v0_m_s: float = 0.0
    diffusion_m2_s: float = 2.0e5
    max_step_days: float = 1.0
    initial_ppm: float = 400.0
    column_air_kg_m2: float = COLUMN_AIR_KG_M2

    def to_dict(self) -> dict:
        return asdict(self)


def flux_to_ppm_rate(flux_kg_m2_s: npt.ArrayLike, column_air_kg_m2: float = COLUMN_AIR_KG_M2) -> FloatArray:
    """Convert a surface CO2 flux to a column mole-fraction tendency (ppm/s)."""
    f = np.asarray(flux_kg_m2_s, dtype=float)
    return f / column_air_kg_m2 * (MOLAR_MASS_AIR / MOLAR_MASS_CO2) * 1e6


class ToyTransport:
    """Single-level upwind advection-diffusion on a regular grid."""

    def __init__(self, grid: SpatialGrid, config: ToyTransportConfig | None = None) -> None:
        if grid.geometry is None:
            raise TransportError("toy transport needs a regular grid with geometry")
        self.grid = grid
        self.geom = grid.geometry
        self.config = config or ToyTransportConfig()
        self._build_geometry()

    def _build_geometry(self) -> None:
        g = self.geom
        radius = EARTH_RADIUS_M
        lat_e = np.deg2rad(g.lat_edges)
        lon_e = np.deg2rad(g.lon_edges)
        dlam = float(lon_e[1] - lon_e[0])
        if not np.allclose(np.diff(lon_e), dlam) or not np.allclose(np.diff(lat_e), lat_e[1] - lat_e[0]):
            raise TransportError("toy transport requires uniform grid spacing")
        dphi = float(lat_e[1] - lat_e[0])
        clat = 0.5 * (lat_e[:-1] + lat_e[1:])
        self.area = self.grid.area.reshape(g.nlat, g.nlon)
        # east faces: length R dphi, center spacing R cos(lat) dlam
        self.east_len = np.full(g.nlat, radius * dphi)
        self.east_dx = radius * np.cos(clat) * dlam
        # north faces (between band i and i+1): length R cos(lat_edge) dlam
        self.north_len = radius * np.cos(lat_e[1:-1]) * dlam
        self.north_dx = radius * dphi
        self.u_east = self.config.u0_m_s * np.cos(clat)
        self.v_north = np.full(g.nlat - 1, self.config.v0_m_s)
        # periodic longitude wraps automatically with np.roll
        self._check_stability()

    def _check_stability(self) -> None:
        dt = self.max_dt_seconds
        courant = np.max(np.abs(self.u_east) * dt / self.east_dx)
        if self.geom.nlat > 1:
            courant += np.max(np.abs(self.v_north)) * dt / self.north_dx
        diff = self.config.diffusion_m2_s * dt * (1.0 / self.east_dx.min() ** 2 + 1.0 / self.north_dx**2)
        if courant > 1.0:
            raise TransportError(f"advective Courant number {courant:.3f} exceeds 1; shrink max_step_days")
        if diff > 0.25:
            raise TransportError(f"diffusion number {diff:.3f} exceeds 0.25; shrink max_step_days")

    @property
    def max_dt_seconds(self) -> float:
        return self.config.max_step_days * 86400.0

    def total_mass(self, conc: FloatArray) -> float:
        """Area-weighted total of the field (conserved by stepping)."""
        c = conc.reshape(self.geom.nlat, self.geom.nlon, -1)
        return float(np.einsum("ij,ijk->", self.area, c))

    def step(self, conc: FloatArray, dt_seconds: float) -> FloatArray:
        """Advance (nlat, nlon, m) mole fractions one step, conservatively."""
        g = self.geom
        c = conc
        d = self.config.diffusion_m2_s
        # east faces: flux from (i, j) into (i, j+1); periodic wrap
        ce = np.roll(c, -1, axis=1)
        u = self.u_east[:, None, None]
        upwind = np.where(u >= 0.0, c, ce)
        f_east = u * self.east_len[:, None, None] * upwind
        f_east += -d * (ce - c) / self.east_dx[:, None, None] * self.east_len[:, None, None]
        div = f_east - np.roll(f_east, 1, axis=1)
        if g.nlat > 1:
            v = self.v_north[:, None, None]
            cn = c[1:]
            cs = c[:-1]
            upwind_n = np.where(v >= 0.0, cs, cn)
            f_north = v * self.north_len[:, None, None] * upwind_n
            f_north += -d * (cn - cs) / self.north_dx * self.north_len[:, None, None]
            div[1:] += -f_north
            div[:-1] += f_north
        return c - dt_seconds * div / self.area[:, :, None]

    def simulate(
        self,
        times: FloatArray,
        source_ppm_s,
        initial: FloatArray,
        gather=None,
    ) -> FloatArray:
        """March the field across native intervals, applying sources.

        ``times`` are native interval centers with uniform spacing;
        ``source_ppm_s(it)`` returns the (n_cells, m) tendency held
        constant across interval ``it``.  ``gather(it, state)`` is
        called with the (n_cells, m) state after each interval; the
        final state is returned.
        """
        g = self.geom
        times = np.asarray(times, dtype=float)
        steps = np.diff(times)
        if times.size < 2 or not np.allclose(steps, steps[0]):
            raise TransportError("native times must be uniformly spaced")
        native_dt = float(steps[0]) * 86400.0
        n_sub = max(1, int(np.ceil(native_dt / self.max_dt_seconds - 1e-12)))
        dt = native_dt / n_sub
        state = initial.reshape(g.nlat, g.nlon, -1).astype(float).copy()
        for it in range(times.size):
            src = source_ppm_s(it).reshape(g.nlat, g.nlon, -1)
            for _ in range(n_sub):
                state += dt * src
                state = self.step(state, dt)
            if gather is not None:
                gather(it, state.reshape(self.grid.n_cells, -1))
        return state.reshape(self.grid.n_cells, -1)


def _gather_plan(times: FloatArray, obs_times: FloatArray, functional: AveragingFunctional) -> list[list[tuple[int, float]]]:
    """Per native step: list of (obs index, weight) to accumulate."""
    half = 0.5 * float(times[1] - times[0])
    ends = times + half
    plan: list[list[tuple[int, float]]] = [[] for _ in times]
    for i, t in enumerate(np.asarray(obs_times, dtype=float)):
        if t < times[0] - half - 1e-9 or t > ends[-1] + 1e-9:
            raise TransportError(f"observation time {t} outside the transported interval")
        last = min(int(np.searchsorted(ends, t - 1e-12)), times.size - 1)
        if functional.window_days <= 0.0:
            members = [last]
        else:
            first = int(np.searchsorted(ends, t - functional.window_days))
            members = list(range(min(first, last), last + 1))
        w = 1.0 / len(members)
        for s in members:
            plan[s].append((i, w))
    return plan


class TransportOperator:
    """Common interface: response matrices and baseline observations."""

    def response_matrix(self, basis: FluxBasisSet, obs_cells, obs_times,
                        functional: AveragingFunctional) -> tuple[FloatArray, FloatArray]:
        raise NotImplementedError


class ToyTransportOperator(TransportOperator):
    """Response-matrix assembly on top of :class:`ToyTransport`."""

    def __init__(self, model: ToyTransport) -> None:
        self.model = model

    def response_matrix(self, basis: FluxBasisSet, obs_cells, obs_times,
                        functional: AveragingFunctional) -> tuple[FloatArray, FloatArray]:
        """Evolve every basis element plus the bottom-up baseline.

        Returns ``(psi, z0)`` where ``psi[i, l]`` is observation i's
        mole-fraction response (ppm) to unit ``alpha_l`` and ``z0`` is
        the baseline under the bottom-up flux and initial condition.
        Columns for elements whose support starts after an observation
        are exactly zero (fluxes cannot act backwards in time).
        """
        grid = self.model.grid
        times = basis.study_times
        obs_cells = np.asarray(obs_cells, dtype=np.int64)
        obs_times = np.asarray(obs_times, dtype=float)
        n_obs = obs_cells.size
        m = basis.n_alpha + 1  # column 0 carries the baseline
        plan = _gather_plan(times, obs_times, functional)

        conv = 1e6 * (MOLAR_MASS_AIR / MOLAR_MASS_CO2) / self.model.config.column_air_kg_m2
        x0_total = basis.bottomup.total()
        native_idx = np.searchsorted(basis.bottomup.times, times)
        lay = basis.layout
        res_cols = {
            (c, r): np.array([lay.index(c, 6, r, period=q) for q in range(1, lay.n_periods + 1)])
            for c in lay.components for r in range(1, lay.n_regions + 1)
        }
        region_cells = [basis.partition.cells_in(r) for r in range(1, lay.n_regions + 1)]
        periods_of_steps = basis.study_periods

        def source(it: int) -> FloatArray:
            src = np.zeros((grid.n_cells, m))
            src[:, 0] = x0_total[:, native_idx[it]]
            factors = basis.separable_time_factors(times[it])
            src[:, basis.separable_global_idx + 1] = basis.separable_patterns * factors[None, :]
            q = int(periods_of_steps[it])
            for c in lay.components:
                resid = basis.study_residual[c][:, it]
                for r in range(1, lay.n_regions + 1):
                    cells = region_cells[r - 1]
                    src[cells, res_cols[(c, r)][q - 1] + 1] = resid[cells]
            return conv * src

        psi = np.zeros((n_obs, m))

        def gather(it: int, state: FloatArray) -> None:
            for i, w in plan[it]:
                psi[i] += w * state[obs_cells[i]]

        initial = np.zeros((grid.n_cells, m))
        initial[:, 0] = self.model.config.initial_ppm
        self.model.simulate(times, source, initial, gather)
        return psi[:, 1:], psi[:, 0].copy()


# -- response cache ----------------------------------------------------

RESPONSE_CACHE_VERSION = 1


def response_cache_key(config: ToyTransportConfig, basis_hash: str, obs_hash: str) -> str:
    payload = json.dumps({"config": config.to_dict(), "basis": basis_hash, "obs": obs_hash},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def observation_hash(obs_cells, obs_times, functional: AveragingFunctional) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(obs_cells, dtype=np.int64).tobytes())
    h.update(np.ascontiguousarray(obs_times, dtype=float).tobytes())
    h.update(repr((functional.window_days, functional.column_weights)).encode())
    return h.hexdigest()


def store_response(cache_dir: str, key: str, psi: FloatArray, z0: FloatArray) -> str:
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"response-{key[:16]}.npz")
    np.savez_compressed(path, version=np.int64(RESPONSE_CACHE_VERSION),
                        key=np.bytes_(key.encode()), psi=psi, z0=z0)
    return path

def load_response(cache_dir: str, key: str) -> tuple[FloatArray, FloatArray] | None:
    """Load a cached response; None on miss, CacheError on corruption."""
    path = os.path.join(cache_dir, f"response-{key[:16]}.npz")
    if not os.path.exists(path):
        return None
    try:
        with np.load(path) as data:
            version = int(data["version"])
            stored = bytes(data["key"]).decode()
            psi, z0 = data["psi"], data["z0"]
    except Exception as exc:
        raise CacheError(f"unreadable response cache {path}: {exc}") from exc
    if version != RESPONSE_CACHE_VERSION:
        raise CacheError(f"response cache {path} has version {version}, expected {RESPONSE_CACHE_VERSION}")
    if stored != key:
        raise CacheError(f"response cache {path} was built for a different configuration")
    return psi, z0


def cached_response_matrix(
    operator: ToyTransportOperator,
    basis: FluxBasisSet,
    obs_cells,
    obs_times,
    functional: AveragingFunctional,
    cache_dir: str | None = None,
) -> tuple[FloatArray, FloatArray]:
    """Response matrix with an optional on-disk cache."""
    if cache_dir is None:
        return operator.response_matrix(basis, obs_cells, obs_times, functional)
    key = response_cache_key(operator.model.config, basis.content_hash(),
                             observation_hash(obs_cells, obs_times, functional))
    hit = load_response(cache_dir, key)
    if hit is not None:
        return hit
    psi, z0 = operator.response_matrix(basis, obs_cells, obs_times, functional)
    store_response(cache_dir, key, psi, z0)
    return psi, z0


# -- precomputed Jacobians ---------------------------------------------


def layout_hash(descriptor: str) -> bytes:
    return hashlib.sha256(descriptor.encode()).digest()


def write_jacobian(path: str, psi: FloatArray, z0: FloatArray, descriptor: str) -> None:
    """Write a Jacobian container: header, row-major float64 matrix, baseline.

    Header layout: 8-byte magic, 1-byte endianness tag (always ``<``;
    data are little-endian), two uint64 dimensions, then a 32-byte
    SHA-256 of the coefficient layout descriptor.
    """
    psi = np.ascontiguousarray(psi, dtype="<f8")
    z0 = np.ascontiguousarray(z0, dtype="<f8")
    if psi.ndim != 2 or z0.shape != (psi.shape[0],):
        raise TransportError("jacobian and baseline dimensions disagree")
    with open(path, "wb") as fh:
        fh.write(JACOBIAN_MAGIC)
        fh.write(b"<")
        fh.write(struct.pack("<QQ", psi.shape[0], psi.shape[1]))
        fh.write(layout_hash(descriptor))
        fh.write(psi.tobytes())
        fh.write(z0.tobytes())


def read_jacobian(path: str, expected_descriptor: str | None = None) -> tuple[FloatArray, FloatArray]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != JACOBIAN_MAGIC:
            raise TransportError(f"{path} is not a Jacobian container (bad magic)")
        endian = fh.read(1)
        if endian != b"<":
            raise TransportError(f"{path} declares unsupported byte order {endian!r}")
        n_obs, n_alpha = struct.unpack("<QQ", fh.read(16))
        stored_hash = fh.read(32)
        if expected_descriptor is not None and stored_hash != layout_hash(expected_descriptor):
            raise TransportError(f"{path} was built for a different coefficient layout")
        psi = np.fromfile(fh, dtype="<f8", count=n_obs * n_alpha)
        z0 = np.fromfile(fh, dtype="<f8", count=n_obs)
        if psi.size != n_obs * n_alpha or z0.size != n_obs:
            raise TransportError(f"{path} is truncated")
        trailing = fh.read(1)
        if trailing:
            raise TransportError(f"{path} has trailing bytes")
    return psi.reshape(n_obs, n_alpha).astype(float), z0.astype(float)


class PrecomputedJacobianOperator(TransportOperator):
    """Serve responses from a Jacobian container instead of a model."""

    def __init__(self, path: str) -> None:
        self.path = path

    def response_matrix(self, basis: FluxBasisSet, obs_cells, obs_times,
                        functional: AveragingFunctional) -> tuple[FloatArray, FloatArray]:
        psi, z0 = read_jacobian(self.path, basis.layout.descriptor())
        n_obs = np.asarray(obs_cells).size
        if psi.shape != (n_obs, basis.n_alpha):
            raise TransportError(
                f"stored Jacobian is {psi.shape}, need ({n_obs}, {basis.n_alpha})"
            )
        return psi, z0
