"""Grid geometry, region partitions, time partitions, and grid file IO."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fluxinv.grid import (
    EARTH_RADIUS_M,
    GRID_HEADER,
    GridError,
    RegionPartition,
    area_weighted_sum,
    make_regular_grid,
    month_boundaries,
    month_of_year,
    read_grid,
    spatial_indicator,
    spatiotemporal_index,
    spatiotemporal_indicator,
    write_grid,
)

SPHERE_AREA = 4.0 * math.pi * EARTH_RADIUS_M**2


def test_cell_areas_tile_the_sphere():
    grid = make_regular_grid(8, 10)
    assert np.all(grid.area > 0)
    assert grid.area.sum() == pytest.approx(SPHERE_AREA, rel=1e-12)


def test_cells_are_lat_major():
    grid = make_regular_grid(3, 4)
    assert grid.n_cells == 12
    # lon varies fastest, lat is constant within each row of four
    assert np.all(np.diff(grid.lat.reshape(3, 4), axis=1) == 0)
    assert np.all(np.diff(grid.lon[:4]) > 0)
    assert np.all(np.diff(grid.lat[::4]) > 0)


def test_area_concentrates_at_equator():
    grid = make_regular_grid(6, 4)
    areas = grid.area.reshape(6, 4)[:, 0]
    assert areas[2] == areas[3]  # symmetric about the equator
    assert areas[2] > areas[0]


@given(nlat=st.integers(2, 12), nlon=st.integers(2, 16))
@settings(max_examples=25, deadline=None)
def test_any_regular_grid_tiles_the_sphere(nlat, nlon):
    grid = make_regular_grid(nlat, nlon)
    assert np.all(grid.area > 0)
    assert grid.area.sum() == pytest.approx(SPHERE_AREA, rel=1e-10)


def test_land_fraction_validation():
    with pytest.raises(GridError):
        make_regular_grid(2, 2, land_fraction=np.array([0.5, 0.5, 2.0, 0.0]))
    with pytest.raises(GridError):
        make_regular_grid(2, 2, land_fraction=np.zeros(3))


def test_check_cell_bounds():
    grid = make_regular_grid(2, 2)
    assert grid.check_cell(3) == 3
    with pytest.raises(GridError):
        grid.check_cell(4)
    with pytest.raises(GridError):
        grid.check_cell(-1)


def test_partition_from_labels(toy):
    part = toy.partition
    assert part.n_regions == 3
    assert part.land_region_ids() == [1, 2]
    assert part.ocean_region_ids() == [3]
    assert sum(part.cells_in(r).size for r in (1, 2, 3)) == toy.grid.n_cells
    assert np.all(part.region_id[part.cells_in(2)] == 2)


def test_partition_rejects_label_gaps():
    grid = make_regular_grid(2, 2)
    with pytest.raises(GridError):
        RegionPartition.from_labels(np.array([1, 1, 3, 3]), grid)
    with pytest.raises(GridError):
        RegionPartition.from_labels(np.array([0, 1, 1, 1]), grid)


def test_partition_land_flags_follow_majority():
    lf = np.array([1.0, 1.0, 0.2, 0.0])
    grid = make_regular_grid(2, 2, land_fraction=lf)
    part = RegionPartition.from_labels(np.array([1, 1, 2, 2]), grid)
    assert list(part.region_is_land) == [True, False]


def test_month_boundaries_align_with_calendar():
    periods = month_boundaries("2014-01-01", 12, 4)
    assert periods.n_periods == 4
    # 2015 months: Jan 31, Feb 28, Mar 31, Apr 30 days
    assert periods.start == 365.0
    assert np.allclose(np.diff(periods.boundaries), [31, 28, 31, 30])
    leap = month_boundaries("2016-01-01", 1, 1)
    assert leap.end - leap.start == 29.0  # Feb 2016


def test_month_boundaries_validation():
    with pytest.raises(GridError):
        month_boundaries("2014-13-01", 0, 2)
    with pytest.raises(GridError):
        month_boundaries("2014-01-01", 0, 0)


def test_period_of_half_open_with_closed_end():
    periods = month_boundaries("2014-01-01", 0, 3)
    starts = periods.boundaries[:-1]
    assert list(periods.period_of(starts)) == [1, 2, 3]
    assert periods.period_of(periods.end) == 3  # end of record is included
    assert periods.period_of(periods.boundaries[1] - 1e-9) == 1
    with pytest.raises(GridError):
        periods.period_of(periods.end + 1.0)
    with pytest.raises(GridError):
        periods.period_of(periods.start - 1e-9)


def test_period_midpoints_and_global_midpoint():
    periods = month_boundaries("2014-01-01", 0, 2)
    mids = periods.period_midpoints()
    assert mids[0] == pytest.approx(15.5)
    assert periods.midpoint == pytest.approx((periods.start + periods.end) / 2)


def test_month_of_year():
    assert list(month_of_year([0.0, 30.9, 31.0, 364.9, 365.0], "2014-01-01")) \
        == [1, 1, 2, 12, 1]


def test_spatial_indicator(toy):
    cell = int(toy.partition.cells_in(2)[0])
    ind = spatial_indicator(toy.partition, cell)
    assert ind.shape == (toy.partition.n_regions,)
    assert ind[1] == 1.0 and ind.sum() == 1.0


def test_spatiotemporal_indicator(toy):
    cell = int(toy.partition.cells_in(1)[0])
    t = float(toy.periods.boundaries[1]) + 0.5
    k = spatiotemporal_index(toy.partition, toy.periods, cell, t)
    ind = spatiotemporal_indicator(toy.partition, toy.periods, cell, t)
    assert ind.size == toy.partition.n_regions * toy.periods.n_periods
    assert ind[k] == 1.0 and ind.sum() == 1.0
    # region-major, period-minor ordering
    assert k == 0 * toy.periods.n_periods + 1


def test_area_weighted_sum_matches_manual(toy):
    rng = np.random.default_rng(0)
    field = rng.standard_normal(toy.grid.n_cells)
    assert area_weighted_sum(toy.grid, field) == pytest.approx(
        float(np.dot(toy.grid.area, field)))
    cells = toy.partition.cells_in(1)
    assert area_weighted_sum(toy.grid, field, cells) == pytest.approx(
        float(np.dot(toy.grid.area[cells], field[cells])))


def test_grid_io_round_trip(toy, tmp_path):
    path = str(tmp_path / "grid.csv")
    write_grid(path, toy.grid, toy.partition)
    with open(path) as fh:
        assert fh.readline().strip() == ",".join(GRID_HEADER)
    grid2, part2 = read_grid(path)
    assert grid2.n_cells == toy.grid.n_cells
    # values are written with 10 significant digits
    np.testing.assert_allclose(grid2.area, toy.grid.area, rtol=1e-9)
    np.testing.assert_allclose(grid2.land_fraction, toy.grid.land_fraction)
    np.testing.assert_array_equal(part2.region_id, toy.partition.region_id)
    assert list(part2.region_is_land) == list(toy.partition.region_is_land)


def test_read_grid_rejects_bad_header():
    with pytest.raises(GridError):
        read_grid("not,the,right,header\n1,2,3,4\n", is_text=True)
