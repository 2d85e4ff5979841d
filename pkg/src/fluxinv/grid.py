"""Spatial grids, region partitions, and time partitions.

The engine works on an unstructured list of grid cells (regular
latitude-longitude grids are a special case that carries extra geometry
used by the toy transport operator).  Regions are a hard partition of
the cells, periods are a hard partition of the study interval, and both
carry 1-based external ids to match the file formats.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

EARTH_RADIUS_M = 6.371e6

FloatArray = npt.NDArray[np.float64]
IntArray = npt.NDArray[np.int64]


class GridError(ValueError):
    """Raised for malformed grids, partitions, or lookups."""


@dataclass(frozen=True)
class RegularGridGeometry:
    """Edge description of a regular latitude-longitude grid.

    Cells are ordered latitude-major: cell ``i * nlon + j`` covers
    latitude band ``i`` (south to north) and longitude column ``j``
    (west to east).
    """

    lat_edges: FloatArray
    lon_edges: FloatArray

    def __post_init__(self) -> None:
        lat = np.asarray(self.lat_edges, dtype=float)
        lon = np.asarray(self.lon_edges, dtype=float)
        object.__setattr__(self, "lat_edges", lat)
        object.__setattr__(self, "lon_edges", lon)
        if lat.ndim != 1 or lat.size < 2 or np.any(np.diff(lat) <= 0):
            raise GridError("latitude edges must be strictly increasing")
        if lon.ndim != 1 or lon.size < 2 or np.any(np.diff(lon) <= 0):
            raise GridError("longitude edges must be strictly increasing")
        if lat[0] < -90.0 - 1e-9 or lat[-1] > 90.0 + 1e-9:
            raise GridError("latitude edges must lie in [-90, 90]")

    @property
    def nlat(self) -> int:
        return self.lat_edges.size - 1

    @property
    def nlon(self) -> int:
        return self.lon_edges.size - 1

    def cell_areas(self) -> FloatArray:
        """Spherical quadrilateral areas (m^2), latitude-major order."""
        lat = np.deg2rad(self.lat_edges)
        lon = np.deg2rad(self.lon_edges)
        band = np.sin(lat[1:]) - np.sin(lat[:-1])
        width = np.diff(lon)
        return (EARTH_RADIUS_M**2 * np.outer(band, width)).ravel()

    def cell_centroids(self) -> tuple[FloatArray, FloatArray]:
        clat = 0.5 * (self.lat_edges[:-1] + self.lat_edges[1:])
        clon = 0.5 * (self.lon_edges[:-1] + self.lon_edges[1:])
        lat2, lon2 = np.meshgrid(clat, clon, indexing="ij")
        return lat2.ravel(), lon2.ravel()


@dataclass(frozen=True)
class SpatialGrid:
    """Cell centroids, areas (m^2), and land fractions."""

    lat: FloatArray
    lon: FloatArray
    area: FloatArray
    land_fraction: FloatArray
    geometry: RegularGridGeometry | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for name in ("lat", "lon", "area", "land_fraction"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        n = self.lat.size
        if any(getattr(self, name).shape != (n,) for name in ("lon", "area", "land_fraction")):
            raise GridError("grid columns must share one length")
        if np.any(self.area <= 0.0):
            raise GridError("cell areas must be positive")
        if np.any((self.land_fraction < 0.0) | (self.land_fraction > 1.0)):
            raise GridError("land fractions must lie in [0, 1]")
        if self.geometry is not None and self.geometry.nlat * self.geometry.nlon != n:
            raise GridError("geometry shape does not match cell count")

    @property
    def n_cells(self) -> int:
        return self.lat.size

    def check_cell(self, cell: int) -> int:
        cell = int(cell)
        if not 0 <= cell < self.n_cells:
            raise GridError(f"unknown cell id {cell} (grid has {self.n_cells} cells)")
        return cell


def make_regular_grid(
    nlat: int,
    nlon: int,
    lat_range: tuple[float, float] = (-90.0, 90.0),
    lon_range: tuple[float, float] = (-180.0, 180.0),
    land_fraction: FloatArray | None = None,
) -> SpatialGrid:
    """Build a regular grid with spherical-quadrilateral areas."""
    geom = RegularGridGeometry(
        lat_edges=np.linspace(lat_range[0], lat_range[1], nlat + 1),
        lon_edges=np.linspace(lon_range[0], lon_range[1], nlon + 1),
    )
    lat, lon = geom.cell_centroids()
    lf = np.zeros(lat.size) if land_fraction is None else np.asarray(land_fraction, float)
    return SpatialGrid(lat=lat, lon=lon, area=geom.cell_areas(), land_fraction=lf, geometry=geom)


@dataclass(frozen=True)
class RegionPartition:
    """Assignment of every cell to one of R regions (ids 1..R).

    ``region_is_land`` defaults to an area-weighted majority vote of the
    member cells' land fractions, which is what the synthetic worlds
    use; pass it explicitly when the vote would be wrong.
    """

    region_id: IntArray
    region_is_land: npt.NDArray[np.bool_] = field(default=None)  # type: ignore[assignment]
    _grid_area: FloatArray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        rid = np.asarray(self.region_id, dtype=np.int64)
        object.__setattr__(self, "region_id", rid)
        if rid.ndim != 1 or rid.size == 0:
            raise GridError("region ids must form a 1-D array")
        r = int(rid.max())
        if rid.min() < 1 or not np.array_equal(np.unique(rid), np.arange(1, r + 1)):
            raise GridError("region ids must cover 1..R with no gaps")
        if self.region_is_land is not None:
            flags = np.asarray(self.region_is_land, dtype=bool)
            if flags.shape != (r,):
                raise GridError("region_is_land must have one flag per region")
            object.__setattr__(self, "region_is_land", flags)

    @classmethod
    def from_labels(
        cls,
        region_id: IntArray,
        grid: SpatialGrid,
        region_is_land: npt.NDArray[np.bool_] | None = None,
    ) -> RegionPartition:
        part = cls(region_id=np.asarray(region_id), region_is_land=region_is_land)
        if part.region_is_land is None:
            flags = np.empty(part.n_regions, dtype=bool)
            for r in range(1, part.n_regions + 1):
                sel = part.region_id == r
                w = grid.area[sel]
                flags[r - 1] = float(np.sum(w * grid.land_fraction[sel]) / np.sum(w)) >= 0.5
            object.__setattr__(part, "region_is_land", flags)
        return part

    @property
    def n_regions(self) -> int:
        return int(self.region_id.max())

    @property
    def n_cells(self) -> int:
        return self.region_id.size

    def cells_in(self, region: int) -> IntArray:
        if not 1 <= region <= self.n_regions:
            raise GridError(f"unknown region id {region}")
        return np.nonzero(self.region_id == region)[0]

    def land_region_ids(self) -> list[int]:
        if self.region_is_land is None:
            raise GridError("partition carries no land/ocean flags")
        return [r + 1 for r in range(self.n_regions) if self.region_is_land[r]]

    def ocean_region_ids(self) -> list[int]:
        if self.region_is_land is None:
            raise GridError("partition carries no land/ocean flags")
        return [r + 1 for r in range(self.n_regions) if not self.region_is_land[r]]


@dataclass(frozen=True)
class TimePartition:
    """Partition of the study interval into Q periods.

    Boundaries are in days since the epoch date.  Periods are
    half-open ``[b_q, b_{q+1})`` except the last, which is closed so the
    final boundary still belongs to the study interval.
    """

    boundaries: FloatArray
    epoch: str = "2000-01-01"

    def __post_init__(self) -> None:
        b = np.asarray(self.boundaries, dtype=float)
        object.__setattr__(self, "boundaries", b)
        if b.ndim != 1 or b.size < 2 or np.any(np.diff(b) <= 0):
            raise GridError("period boundaries must be strictly increasing")
        np.datetime64(self.epoch)  # validates the epoch string

    @property
    def n_periods(self) -> int:
        return self.boundaries.size - 1

    @property
    def start(self) -> float:
        return float(self.boundaries[0])

    @property
    def end(self) -> float:
        return float(self.boundaries[-1])

    @property
    def midpoint(self) -> float:
        """Middle day of the study interval (the reparameterization pivot)."""
        return 0.5 * (self.start + self.end)

    def period_of(self, t: npt.ArrayLike) -> IntArray:
        """1-based period index of each time; errors outside the interval."""
        tt = np.asarray(t, dtype=float)
        if np.any(tt < self.start) or np.any(tt > self.end):
            raise GridError("time outside the partitioned interval")
        q = np.searchsorted(self.boundaries, tt, side="right")
        q = np.clip(q, 1, self.n_periods)
        return q.astype(np.int64)

    def period_midpoints(self) -> FloatArray:
        return 0.5 * (self.boundaries[:-1] + self.boundaries[1:])


def month_boundaries(epoch: str, start_month: int, n_months: int) -> TimePartition:
    """Monthly time partition, in days since ``epoch``.

    ``start_month`` counts calendar months from the epoch month (0 means
    the epoch month itself).
    """
    try:
        m0 = np.datetime64(epoch, "M") + start_month
    except ValueError as exc:
        raise GridError(f"invalid epoch date {epoch!r}: {exc}") from exc
    months = m0 + np.arange(n_months + 1)
    days = (months.astype("datetime64[D]") - np.datetime64(epoch, "D")).astype(float)
    return TimePartition(boundaries=days, epoch=epoch)


def month_of_year(t: npt.ArrayLike, epoch: str) -> IntArray:
    """Calendar month (1..12) of each time, given days since ``epoch``."""
    tt = np.atleast_1d(np.asarray(t, dtype=float))
    secs = np.floor(tt * 86400.0).astype("timedelta64[s]")
    stamps = np.datetime64(epoch, "s") + secs
    months = stamps.astype("datetime64[M]")
    years = stamps.astype("datetime64[Y]")
    out = (months - years.astype("datetime64[M]")).astype(np.int64) + 1
    return out if np.ndim(t) else out[0]


def spatial_indicator(partition: RegionPartition, cell: int) -> FloatArray:
    """Length-R one-hot vector picking out the cell's region."""
    out = np.zeros(partition.n_regions)
    out[partition.region_id[cell] - 1] = 1.0
    return out


def spatiotemporal_index(partition: RegionPartition, periods: TimePartition, cell: int, t: float) -> int:
    """Flat index of the (region, period) pair, region-major."""
    r = int(partition.region_id[cell])
    q = int(periods.period_of(t))
    return (r - 1) * periods.n_periods + (q - 1)


def spatiotemporal_indicator(
    partition: RegionPartition, periods: TimePartition, cell: int, t: float
) -> FloatArray:
    """Length R*Q one-hot vector for the (region, period) pair."""
    out = np.zeros(partition.n_regions * periods.n_periods)
    out[spatiotemporal_index(partition, periods, cell, t)] = 1.0
    return out


def area_weighted_sum(grid: SpatialGrid, field_values: FloatArray, cells: IntArray | None = None) -> float:
    """Sum of area * field over the given cells (all cells by default)."""
    f = np.asarray(field_values, dtype=float)
    if f.shape != (grid.n_cells,):
        raise GridError("field must have one value per cell")
    if cells is None:
        return float(np.dot(grid.area, f))
    cells = np.asarray(cells, dtype=np.int64)
    return float(np.dot(grid.area[cells], f[cells]))


GRID_HEADER = ["cell_lat", "cell_lon", "area", "region_id", "land_fraction"]


def write_grid(path: str, grid: SpatialGrid, partition: RegionPartition) -> None:
    """Write the grid + partition table (CSV, one row per cell)."""
    if partition.n_cells != grid.n_cells:
        raise GridError("partition does not match grid")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GRID_HEADER)
        for i in range(grid.n_cells):
            w.writerow(
                [
                    format(grid.lat[i], ".10g"),
                    format(grid.lon[i], ".10g"),
                    format(grid.area[i], ".10g"),
                    int(partition.region_id[i]),
                    format(grid.land_fraction[i], ".10g"),
                ]
            )


def read_grid(path_or_text: str, is_text: bool = False) -> tuple[SpatialGrid, RegionPartition]:
    """Read a grid + partition table written by :func:`write_grid`."""
    if is_text:
        fh = io.StringIO(path_or_text)
    else:
        fh = open(path_or_text, newline="")
    with fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != GRID_HEADER:
        raise GridError(f"grid file must start with header {','.join(GRID_HEADER)}")
    body = rows[1:]
    if not body:
        raise GridError("grid file has no cells")
    try:
        lat = np.array([float(r[0]) for r in body])
        lon = np.array([float(r[1]) for r in body])
        area = np.array([float(r[2]) for r in body])
        rid = np.array([int(r[3]) for r in body])
        lf = np.array([float(r[4]) for r in body])
    except (ValueError, IndexError) as exc:
        raise GridError(f"malformed grid row: {exc}") from None
    grid = SpatialGrid(lat=lat, lon=lon, area=area, land_fraction=lf)
    return grid, RegionPartition.from_labels(rid, grid)
