"""Shared fixtures: a small analytic world and the standard desk world."""
from dataclasses import dataclass

import numpy as np
import pytest

from fluxinv.decomposition import BottomUpFluxes, FluxBasisSet, build_basis
from fluxinv.grid import (
    RegionPartition,
    SpatialGrid,
    TimePartition,
    make_regular_grid,
    month_boundaries,
)
from fluxinv.osse import DeskWorld, build_desk_world


@dataclass(frozen=True)
class ToyWorld:
    """A 6x8 world with two land patches, one ocean region, 4 study months."""

    grid: SpatialGrid
    partition: RegionPartition
    periods: TimePartition
    bottomup: BottomUpFluxes
    basis: FluxBasisSet


def _toy_fields(grid: SpatialGrid, native: np.ndarray) -> dict[str, np.ndarray]:
    t_yr = native / 365.25
    land = grid.land_fraction[:, None] > 0.5
    gpp = -(1.0 + 0.15 * t_yr[None, :]
            + 0.5 * np.sin(2 * np.pi * (grid.lat[:, None] / 90.0 + t_yr[None, :])))
    resp = 0.9 + 0.4 * np.cos(2 * np.pi * t_yr[None, :] + grid.lon[:, None] / 57.0)
    ocean = 0.1 * np.sin(2 * np.pi * t_yr[None, :]) - 0.05
    return {
        "gpp": np.where(land, gpp * 1e-8, 0.0),
        "resp": np.where(land, resp * 1e-8, 0.0),
        "ocean": np.where(land, 0.0, ocean * 1e-8),
    }


def make_toy_world(n_harmonics: dict[str, int] | None = None) -> ToyWorld:
    nlat, nlon = 6, 8
    lf = np.zeros((nlat, nlon))
    lf[1:5, 1:4] = 1.0
    lf[2:4, 5:7] = 1.0
    grid = make_regular_grid(nlat, nlon, land_fraction=lf.ravel())
    labels = np.full(nlat * nlon, 3)
    labels[lf.ravel() > 0.5] = 1
    second = np.zeros((nlat, nlon), dtype=bool)
    second[2:4, 5:7] = True
    labels[second.ravel()] = 2
    partition = RegionPartition.from_labels(labels, grid)
    periods = month_boundaries("2014-01-01", 12, 4)
    native = np.arange(0.0, periods.end + 1.0)
    bottomup = BottomUpFluxes(times=native, fields=_toy_fields(grid, native))
    nh = n_harmonics or {"gpp": 2, "resp": 2, "ocean": 1}
    basis = build_basis(grid, partition, periods, bottomup, nh)
    return ToyWorld(grid=grid, partition=partition, periods=periods,
                    bottomup=bottomup, basis=basis)


@pytest.fixture(scope="session")
def toy() -> ToyWorld:
    return make_toy_world()


@pytest.fixture(scope="session")
def desk_world() -> DeskWorld:
    return build_desk_world()


def make_fullscale_basis() -> FluxBasisSet:
    """A 23-region, 79-month basis with three harmonics per component.

    Small on cells but full-scale in regions, periods, and harmonics, so
    layout dimensions and constraint counts land at production size.
    """
    nlat, nlon = 6, 8
    n_cells = nlat * nlon
    labels = np.full(n_cells, 23)
    labels[:22] = np.arange(1, 23)
    lf = (labels < 23).astype(float)
    grid = make_regular_grid(nlat, nlon, land_fraction=lf)
    partition = RegionPartition.from_labels(labels, grid)
    periods = month_boundaries("2014-09-01", 0, 79)
    native = np.arange(0.0, periods.end + 1.0, 2.0)
    bottomup = BottomUpFluxes(times=native, fields=_toy_fields(grid, native))
    return build_basis(grid, partition, periods, bottomup,
                       {"gpp": 3, "resp": 3, "ocean": 3})


@pytest.fixture(scope="session")
def fullscale_basis() -> FluxBasisSet:
    return make_fullscale_basis()
