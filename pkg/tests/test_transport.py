"""Toy advection-diffusion transport, response matrices, and Jacobian files."""
import numpy as np
import pytest

from fluxinv.decomposition import BottomUpFluxes, build_basis
from fluxinv.grid import RegionPartition, SpatialGrid, make_regular_grid, month_boundaries
from fluxinv.transport import (
    MOLAR_MASS_AIR,
    MOLAR_MASS_CO2,
    AveragingFunctional,
    CacheError,
    PrecomputedJacobianOperator,
    ToyTransport,
    ToyTransportConfig,
    ToyTransportOperator,
    TransportError,
    cached_response_matrix,
    flux_to_ppm_rate,
    load_response,
    observation_hash,
    read_jacobian,
    response_cache_key,
    store_response,
    write_jacobian,
)


@pytest.fixture(scope="module")
def model():
    return ToyTransport(make_regular_grid(6, 8))


def test_requires_grid_geometry():
    bare = SpatialGrid(lat=np.zeros(2), lon=np.array([0.0, 180.0]),
                       area=np.ones(2), land_fraction=np.zeros(2))
    with pytest.raises(TransportError):
        ToyTransport(bare)


def test_stability_guards():
    grid = make_regular_grid(6, 8)
    with pytest.raises(TransportError, match="Courant"):
        ToyTransport(grid, ToyTransportConfig(u0_m_s=500.0))
    with pytest.raises(TransportError, match="diffusion"):
        ToyTransport(grid, ToyTransportConfig(diffusion_m2_s=5e8))


def test_step_conserves_mass(model):
    rng = np.random.default_rng(0)
    g = model.geom
    state = 400.0 + rng.standard_normal((g.nlat, g.nlon, 1))
    before = model.total_mass(state)
    for _ in range(25):
        state = model.step(state, model.max_dt_seconds)
    assert model.total_mass(state) == pytest.approx(before, rel=1e-12)


def test_uniform_field_stays_uniform(model):
    g = model.geom
    state = np.full((g.nlat, g.nlon, 1), 417.0)
    for _ in range(10):
        state = model.step(state, model.max_dt_seconds)
    np.testing.assert_allclose(state, 417.0, rtol=1e-12)


def test_diffusion_smooths_and_conserves():
    grid = make_regular_grid(6, 8)
    model = ToyTransport(grid, ToyTransportConfig(u0_m_s=0.0, diffusion_m2_s=5e5))
    g = model.geom
    state = np.zeros((g.nlat, g.nlon, 1))
    state[3, 4, 0] = 100.0
    before = model.total_mass(state)
    spread_before = state.max()
    for _ in range(20):
        state = model.step(state, model.max_dt_seconds)
    assert model.total_mass(state) == pytest.approx(before, rel=1e-12)
    assert state.max() < spread_before
    assert state.min() > -1e-9  # upwind + small diffusion number stays positive


def test_simulate_requires_uniform_times(model):
    with pytest.raises(TransportError):
        model.simulate(np.array([0.0, 1.0, 3.0]),
                       lambda it: np.zeros((model.grid.n_cells, 1)),
                       np.zeros((model.grid.n_cells, 1)))


def test_simulate_source_injection_budget(model):
    times = np.arange(0.0, 5.0)
    src_ppm_s = 1e-6
    source = np.full((model.grid.n_cells, 1), src_ppm_s)
    final = model.simulate(times, lambda it: source,
                           np.zeros((model.grid.n_cells, 1)))
    added = model.total_mass(final.reshape(model.geom.nlat, model.geom.nlon, 1))
    expect = src_ppm_s * times.size * 86400.0 * model.grid.area.sum()
    assert added == pytest.approx(expect, rel=1e-12)


def test_flux_to_ppm_rate_known_value():
    rate = flux_to_ppm_rate(1.0, column_air_kg_m2=1.0)
    assert rate == pytest.approx(MOLAR_MASS_AIR / MOLAR_MASS_CO2 * 1e6)
    # heavier column dilutes the signal proportionally
    assert flux_to_ppm_rate(2.0, column_air_kg_m2=4.0) == pytest.approx(rate / 2.0)


def test_averaging_functional_validation():
    with pytest.raises(TransportError):
        AveragingFunctional(window_days=-1.0)
    with pytest.raises(TransportError):
        AveragingFunctional(column_weights=(0.5, 0.2))
    AveragingFunctional(window_days=0.5, column_weights=(0.25, 0.75))


# -- response matrices --------------------------------------------------------


def zero_flux_basis():
    grid = make_regular_grid(4, 6)
    labels = np.r_[np.ones(12, dtype=int), np.full(12, 2)]
    part = RegionPartition.from_labels(labels, grid,
                                       region_is_land=np.array([True, False]))
    periods = month_boundaries("2014-01-01", 0, 3)
    native = np.arange(0.0, periods.end + 1.0)
    zeros = np.zeros((grid.n_cells, native.size))
    bu = BottomUpFluxes(times=native, fields={"gpp": zeros, "resp": zeros,
                                              "ocean": zeros})
    basis = build_basis(grid, part, periods, bu, {"gpp": 1, "resp": 1, "ocean": 1})
    return grid, basis


def test_zero_flux_baseline_stays_at_initial_ppm():
    grid, basis = zero_flux_basis()
    op = ToyTransportOperator(ToyTransport(grid))
    cells = np.array([0, 7, 15])
    times = np.array([20.0, 45.0, 80.0])
    psi, z0 = op.response_matrix(basis, cells, times, AveragingFunctional())
    np.testing.assert_allclose(z0, 400.0, rtol=1e-12)
    np.testing.assert_allclose(psi, 0.0, atol=1e-18)  # zero patterns, zero residuals


def toy_operator(toy):
    return ToyTransportOperator(ToyTransport(toy.grid))


def test_response_columns_are_causal(toy):
    op = toy_operator(toy)
    lay = toy.basis.layout
    t_obs = float(toy.periods.boundaries[1]) - 2.0  # inside study month 1
    psi, z0 = op.response_matrix(toy.basis, np.array([5]), np.array([t_obs]),
                                 AveragingFunctional())
    assert abs(z0[0] - 400.0) > 1e-6  # flux signal reaches the observation
    for c in lay.components:
        for r in range(1, lay.n_regions + 1):
            for q in (2, 3, 4):  # support starts after the observation
                col = lay.index(c, 6, r, period=q)
                assert psi[0, col] == 0.0
    # at least some same-period and seasonal columns respond
    assert np.count_nonzero(psi[0]) > 0


def test_response_matrix_matches_direct_simulation(toy):
    # psi @ alpha + z0 must equal a simulation under the perturbed flux
    op = toy_operator(toy)
    lay = toy.basis.layout
    rng = np.random.default_rng(1)
    alpha = rng.uniform(-0.3, 0.3, lay.n_total)
    cells = np.array([3, 20, 40])
    t_end = float(toy.periods.end)
    times = np.array([t_end - 40.0, t_end - 10.0, t_end - 1.0])
    fn = AveragingFunctional()
    psi, z0 = op.response_matrix(toy.basis, cells, times, fn)
    predicted = z0 + psi @ alpha

    conv = flux_to_ppm_rate(1.0, op.model.config.column_air_kg_m2)
    study = toy.basis.study_times
    flux = np.zeros((toy.grid.n_cells, study.size))
    for c in lay.components:
        sl = lay.component_slice(c)
        flux += toy.basis.component_flux(c, alpha[sl], study)
    gathered = {}

    def source(it):
        return conv * flux[:, it:it + 1]

    def gather(it, state):
        gathered[it] = state[:, 0].copy()

    initial = np.full((toy.grid.n_cells, 1), op.model.config.initial_ppm)
    op.model.simulate(study, source, initial, gather)
    half = 0.5 * float(study[1] - study[0])
    for i, (cell, t) in enumerate(zip(cells, times)):
        it = int(np.searchsorted(study + half, t - 1e-12))
        assert predicted[i] == pytest.approx(gathered[it][cell], rel=1e-9), i


def test_window_functional_averages_native_steps(toy):
    op = toy_operator(toy)
    cells = np.array([10])
    t_obs = np.array([float(toy.periods.start) + 30.0])
    instant = AveragingFunctional()
    windowed = AveragingFunctional(window_days=3.0)
    psi_i, z0_i = op.response_matrix(toy.basis, cells, t_obs, instant)
    psi_w, z0_w = op.response_matrix(toy.basis, cells, t_obs, windowed)
    study = toy.basis.study_times
    half = 0.5 * float(study[1] - study[0])
    last = int(np.searchsorted(study + half, t_obs[0] - 1e-12))
    members = []
    for it in range(last + 1):
        psi_s, z0_s = op.response_matrix(toy.basis, cells,
                                         np.array([float(study[it])]), instant)
        members.append((psi_s, z0_s))
    first = int(np.searchsorted(study + half, t_obs[0] - 3.0))
    window_members = members[first:last + 1]
    np.testing.assert_allclose(
        z0_w[0], np.mean([m[1][0] for m in window_members]), rtol=1e-10)
    np.testing.assert_allclose(
        psi_w[0], np.mean([m[0][0] for m in window_members], axis=0), atol=1e-12)
    np.testing.assert_allclose(z0_i[0], members[last][1][0], rtol=1e-12)


def test_observation_outside_interval_rejected(toy):
    op = toy_operator(toy)
    with pytest.raises(TransportError):
        op.response_matrix(toy.basis, np.array([0]),
                           np.array([float(toy.periods.end) + 10.0]),
                           AveragingFunctional())


# -- response cache -----------------------------------------------------------


class CountingOperator(ToyTransportOperator):
    def __init__(self, model):
        super().__init__(model)
        self.calls = 0

    def response_matrix(self, *args, **kwargs):
        self.calls += 1
        return super().response_matrix(*args, **kwargs)


def test_response_cache_round_trip(toy, tmp_path):
    op = CountingOperator(ToyTransport(toy.grid))
    cells = np.array([2, 9])
    times = np.array([float(toy.periods.start) + 10.0,
                      float(toy.periods.start) + 50.0])
    fn = AveragingFunctional()
    cache = str(tmp_path / "responses")
    psi1, z01 = cached_response_matrix(op, toy.basis, cells, times, fn, cache)
    psi2, z02 = cached_response_matrix(op, toy.basis, cells, times, fn, cache)
    assert op.calls == 1  # second call served from disk
    np.testing.assert_array_equal(psi1, psi2)
    np.testing.assert_array_equal(z01, z02)
    # different observations -> different key -> recompute
    cached_response_matrix(op, toy.basis, cells, times + 1.0, fn, cache)
    assert op.calls == 2


def test_response_cache_miss_returns_none(tmp_path):
    assert load_response(str(tmp_path), "0" * 64) is None


def test_response_cache_detects_corruption(toy, tmp_path):
    op = ToyTransportOperator(ToyTransport(toy.grid))
    key = response_cache_key(op.model.config, toy.basis.content_hash(),
                             observation_hash(np.array([0]), np.array([400.0]),
                                              AveragingFunctional()))
    path = store_response(str(tmp_path), key, np.ones((1, 3)), np.ones(1))
    raw = bytearray(open(path, "rb").read())
    raw[len(raw) // 2] ^= 0xFF
    with open(path, "wb") as fh:
        fh.write(raw)
    with pytest.raises(CacheError):
        load_response(str(tmp_path), key)


def test_response_cache_detects_key_mismatch(tmp_path):
    key_a = "a" * 64
    key_b = "b" * 64
    path_a = store_response(str(tmp_path), key_a, np.ones((2, 2)), np.ones(2))
    path_b = path_a.replace("response-" + key_a[:16], "response-" + key_b[:16])
    import os
    os.rename(path_a, path_b)
    with pytest.raises(CacheError, match="different configuration"):
        load_response(str(tmp_path), key_b)


# -- Jacobian containers ------------------------------------------------------


def test_jacobian_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    psi = rng.standard_normal((5, 9))
    z0 = rng.standard_normal(5)
    path = str(tmp_path / "transport.jac")
    write_jacobian(path, psi, z0, "layout-v1")
    psi2, z02 = read_jacobian(path, "layout-v1")
    np.testing.assert_array_equal(psi, psi2)
    np.testing.assert_array_equal(z0, z02)
    # descriptor check is optional on read
    psi3, _ = read_jacobian(path)
    np.testing.assert_array_equal(psi, psi3)


def test_jacobian_rejects_bad_magic(tmp_path):
    path = str(tmp_path / "bad.jac")
    with open(path, "wb") as fh:
        fh.write(b"NOTAJAC!" + b"\x00" * 64)
    with pytest.raises(TransportError, match="bad magic"):
        read_jacobian(path)


def test_jacobian_rejects_wrong_layout(tmp_path):
    path = str(tmp_path / "transport.jac")
    write_jacobian(path, np.ones((2, 3)), np.ones(2), "layout-v1")
    with pytest.raises(TransportError, match="different coefficient layout"):
        read_jacobian(path, "layout-v2")


def test_jacobian_rejects_truncation_and_trailing(tmp_path):
    path = str(tmp_path / "transport.jac")
    write_jacobian(path, np.ones((2, 3)), np.ones(2), "layout-v1")
    raw = open(path, "rb").read()
    short = str(tmp_path / "short.jac")
    with open(short, "wb") as fh:
        fh.write(raw[:-9])
    with pytest.raises(TransportError, match="truncated"):
        read_jacobian(short)
    longer = str(tmp_path / "long.jac")
    with open(longer, "wb") as fh:
        fh.write(raw + b"\x00")
    with pytest.raises(TransportError, match="trailing"):
        read_jacobian(longer)


def test_jacobian_validates_shapes():
    with pytest.raises(TransportError):
        write_jacobian("/dev/null", np.ones((2, 3)), np.ones(3), "d")


def test_precomputed_operator_serves_and_validates(toy, tmp_path):
    op = ToyTransportOperator(ToyTransport(toy.grid))
    cells = np.array([1, 30])
    times = np.array([float(toy.periods.start) + 5.0,
                      float(toy.periods.start) + 25.0])
    fn = AveragingFunctional()
    psi, z0 = op.response_matrix(toy.basis, cells, times, fn)
    path = str(tmp_path / "toy.jac")
    write_jacobian(path, psi, z0, toy.basis.layout.descriptor())
    pre = PrecomputedJacobianOperator(path)
    psi2, z02 = pre.response_matrix(toy.basis, cells, times, fn)
    np.testing.assert_array_equal(psi, psi2)
    np.testing.assert_array_equal(z0, z02)
    with pytest.raises(TransportError):
        pre.response_matrix(toy.basis, cells[:1], times[:1], fn)
