"""Harmonic decomposition fits, the scaling basis, and flux aggregation."""
import numpy as np
import pytest

from fluxinv.decomposition import (
    AlphaLayout,
    BottomUpFluxes,
    DecompositionError,
    build_basis,
    design_matrix,
    fit_harmonics,
)
from fluxinv.grid import RegionPartition, make_regular_grid, month_boundaries

from conftest import make_toy_world

PERIOD = 365.25


# -- harmonic fits -----------------------------------------------------------


def test_design_matrix_columns():
    t = np.linspace(0.0, 730.0, 50)
    x = design_matrix(t, 2)
    assert x.shape == (50, 2 + 4 * 2)
    np.testing.assert_array_equal(x[:, 0], 1.0)
    np.testing.assert_array_equal(x[:, 1], t)
    w = 2 * np.pi / PERIOD
    np.testing.assert_allclose(x[:, 2], np.cos(w * t))


def test_fit_constant_series():
    t = np.arange(0.0, 400.0)
    fit = fit_harmonics(t, np.full((1, t.size), 5.0), 2)
    assert fit.coefficient(0)[0] == pytest.approx(5.0)
    assert fit.coefficient(1)[0] == pytest.approx(0.0, abs=1e-12)
    for fam in (2, 3, 4, 5):
        for k in (1, 2):
            assert fit.coefficient(fam, k)[0] == pytest.approx(0.0, abs=1e-12)
    assert np.abs(fit.residual).max() / 5.0 < 1e-12


def test_fit_recovers_pure_harmonic():
    t = np.arange(0.0, 4 * 365.25)
    series = np.cos(2 * np.pi * t / PERIOD)[None, :]
    fit = fit_harmonics(t, series, 1)
    assert fit.coefficient(2, 1)[0] == pytest.approx(1.0, abs=1e-9)
    others = [fit.coefficient(0)[0], fit.coefficient(1)[0], fit.coefficient(3, 1)[0],
              fit.coefficient(4, 1)[0], fit.coefficient(5, 1)[0]]
    np.testing.assert_allclose(others, 0.0, atol=1e-9)


def test_fit_recovers_known_coefficients_within_three_se():
    rng = np.random.default_rng(3)
    t = np.arange(0.0, 3 * 365.25, 1.0)
    x = design_matrix(t, 2)
    beta_true = rng.normal(scale=[1.0, 1e-3, 0.5, 1e-3, 0.5, 1e-3, 0.3, 1e-3, 0.3, 1e-3])
    noise_sd = 0.2
    series = (x @ beta_true + rng.normal(scale=noise_sd, size=t.size))[None, :]
    fit = fit_harmonics(t, series, 2)
    beta_hat = fit.beta[0]
    se = noise_sd * np.sqrt(np.diag(np.linalg.inv(x.T @ x)))
    assert np.all(np.abs(beta_hat - beta_true) < 3 * se)


def test_reconstruction_identity():
    rng = np.random.default_rng(4)
    t = np.arange(0.0, 500.0, 1.0)
    series = rng.standard_normal((3, t.size))
    fit = fit_harmonics(t, series, 3)
    recon = fit.evaluate(t) + fit.residual_at(t)
    scale = np.abs(series).max()
    assert np.abs(recon - series).max() / scale < 1e-10


def test_fit_rejects_rank_deficient_design():
    t = np.full(20, 7.0)  # identical time stamps
    with pytest.raises(DecompositionError):
        fit_harmonics(t, np.ones((1, 20)), 1)


def test_fit_rejects_short_series():
    t = np.arange(5.0)
    with pytest.raises(DecompositionError):
        fit_harmonics(t, np.ones((1, 5)), 1)  # needs >= 2 + 4K points


def test_residual_at_requires_fitted_times():
    t = np.arange(0.0, 400.0)
    fit = fit_harmonics(t, np.ones((1, t.size)), 1)
    with pytest.raises(DecompositionError):
        fit.residual_at(np.array([-5.0]))


def test_residual_extension_repeats_most_recent_year():
    t = np.arange(0.0, 500.0)
    rng = np.random.default_rng(5)
    series = rng.standard_normal((1, t.size))
    fit = fit_harmonics(t, series, 1)
    ahead = fit.residual_at(np.array([499.0 + PERIOD]))
    behind = fit.residual_at(np.array([499.0]))
    np.testing.assert_allclose(ahead, behind)


# -- bottom-up container -----------------------------------------------------


def test_bottomup_validation():
    t = np.arange(10.0)
    good = np.zeros((4, 10))
    with pytest.raises(DecompositionError):
        BottomUpFluxes(times=t[::-1],
                       fields={"gpp": good, "resp": good, "ocean": good})
    with pytest.raises(DecompositionError):
        BottomUpFluxes(times=t,
                       fields={"gpp": good, "resp": good, "ocean": np.zeros((4, 9))})
    bu = BottomUpFluxes(times=t, fields={"gpp": good, "resp": good})
    with pytest.raises(DecompositionError):
        bu.component("ocean")


def test_bottomup_total(toy):
    total = toy.bottomup.total()
    expect = sum(toy.bottomup.fields[c] for c in ("gpp", "resp", "ocean"))
    np.testing.assert_array_equal(total, expect)


# -- layout ------------------------------------------------------------------


def test_component_dim_formula():
    lay = AlphaLayout(4, 24, {"gpp": 3, "resp": 3, "ocean": 2})
    assert lay.component_dim("gpp") == 2 * 4 + 4 * 3 * 4 + 24 * 4 == 152
    assert lay.component_dim("ocean") == 2 * 4 + 4 * 2 * 4 + 24 * 4 == 136
    assert lay.n_total == 440


def test_component_dim_production_scale():
    lay = AlphaLayout(23, 79, {"gpp": 3, "resp": 3, "ocean": 3})
    assert lay.component_dim("gpp") == 2139
    assert lay.n_total == 3 * 2139


def test_component_dim_minimal():
    lay = AlphaLayout(1, 1, {"gpp": 1, "resp": 1, "ocean": 1})
    assert lay.component_dim("gpp") == 7


def test_index_describe_round_trip(toy):
    lay = toy.basis.layout
    for i in range(lay.n_total):
        key = lay.describe(i)
        assert lay.index(key.component, key.family, key.region,
                         harmonic=key.harmonic, period=key.period) == i
    assert len(set(lay.labels())) == lay.n_total


def test_index_validates_coordinates(toy):
    lay = toy.basis.layout
    with pytest.raises(DecompositionError):
        lay.index("gpp", 0, lay.n_regions + 1)
    with pytest.raises(DecompositionError):
        lay.index("gpp", 2, 1)  # harmonic required
    with pytest.raises(DecompositionError):
        lay.index("gpp", 6, 1)  # period required
    with pytest.raises(DecompositionError):
        lay.index("gpp", 7, 1)
    with pytest.raises(DecompositionError):
        lay.describe(lay.n_total)


def test_descriptor_mentions_every_dimension(toy):
    d = toy.basis.layout.descriptor()
    assert "R=3" in d and "Q=4" in d and "gpp:2" in d


# -- basis evaluation --------------------------------------------------------


def study_time_sample(toy, n=7, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(toy.periods.start, toy.periods.end, n)


def test_alpha_zero_reproduces_bottomup(toy):
    lay = toy.basis.layout
    sel = np.isin(toy.bottomup.times, toy.basis.study_times)
    for c in ("gpp", "resp", "ocean"):
        flux = toy.basis.component_flux(c, np.zeros(lay.component_dim(c)),
                                        toy.basis.study_times)
        truth = toy.bottomup.fields[c][:, sel]
        scale = max(np.abs(truth).max(), 1e-300)
        assert np.abs(flux - truth).max() / scale < 1e-10


def test_alpha_ones_doubles_bottomup(toy):
    # each basis element is one piece of the decomposition, so summing
    # all of them reproduces the bottom-up field on top of the baseline
    lay = toy.basis.layout
    sel = np.isin(toy.bottomup.times, toy.basis.study_times)
    for c in ("gpp", "resp", "ocean"):
        flux = toy.basis.component_flux(c, np.ones(lay.component_dim(c)),
                                        toy.basis.study_times)
        truth = toy.bottomup.fields[c][:, sel]
        scale = max(np.abs(truth).max(), 1e-300)
        assert np.abs(flux - 2.0 * truth).max() / scale < 1e-10


def test_phi_row_sums_to_bottomup(toy):
    lay = toy.basis.layout
    rng = np.random.default_rng(6)
    sel = np.isin(toy.bottomup.times, toy.basis.study_times)
    times = toy.bottomup.times[sel]
    for _ in range(20):
        cell = int(rng.integers(toy.grid.n_cells))
        j = int(rng.integers(times.size))
        row = toy.basis.phi_row(cell, float(times[j]))
        for c in ("gpp", "resp", "ocean"):
            total = row[lay.component_slice(c)].sum()
            assert total == pytest.approx(
                float(toy.bottomup.fields[c][cell, sel][j]), rel=1e-10, abs=1e-22)


def test_phi_row_vanishes_outside_own_region(toy):
    lay = toy.basis.layout
    cell = int(toy.partition.cells_in(1)[0])
    t = float(toy.basis.study_times[3])
    row = toy.basis.phi_row(cell, t)
    for i in np.nonzero(row)[0]:
        assert lay.describe(int(i)).region == 1


def test_intercept_scaling_adds_intercept_field(toy):
    lay = toy.basis.layout
    r = 2
    cells = toy.partition.cells_in(r)
    alpha = np.zeros(lay.component_dim("gpp"))
    alpha[lay.index("gpp", 0, r) - lay.component_offset("gpp")] = 1.0
    t = toy.basis.study_times[:5]
    base = toy.basis.component_flux("gpp", np.zeros_like(alpha), t)
    bumped = toy.basis.component_flux("gpp", alpha, t)
    beta0 = toy.basis.fits["gpp"].coefficient(0)
    np.testing.assert_allclose(bumped[cells] - base[cells],
                               np.tile(beta0[cells][:, None], (1, 5)), atol=1e-24)
    outside = np.setdiff1d(np.arange(toy.grid.n_cells), cells)
    np.testing.assert_array_equal(bumped[outside], base[outside])


def test_component_flux_linearity(toy):
    lay = toy.basis.layout
    rng = np.random.default_rng(7)
    dim = lay.component_dim("resp")
    a1, a2 = rng.standard_normal(dim), rng.standard_normal(dim)
    t = study_time_sample(toy)
    f0 = toy.basis.component_flux("resp", np.zeros(dim), t)
    f1 = toy.basis.component_flux("resp", a1, t)
    f2 = toy.basis.component_flux("resp", a2, t)
    f12 = toy.basis.component_flux("resp", a1 + a2, t)
    np.testing.assert_allclose(f12 - f0, (f1 - f0) + (f2 - f0), rtol=1e-10, atol=1e-22)


def test_component_flux_rejects_wrong_length(toy):
    with pytest.raises(DecompositionError):
        toy.basis.component_flux("gpp", np.zeros(3), toy.basis.study_times[:2])


# -- aggregation -------------------------------------------------------------


def constant_world(c0=2.0e-8):
    """A world whose gpp field is constant, for closed-form aggregates."""
    grid = make_regular_grid(3, 4, land_fraction=np.ones(12))
    labels = np.r_[np.ones(6, dtype=int), np.full(6, 2)]
    part = RegionPartition.from_labels(labels, grid)
    periods = month_boundaries("2014-01-01", 0, 2)
    native = np.arange(0.0, periods.end + 1.0)
    n = native.size
    fields = {
        "gpp": np.full((12, n), -c0),
        "resp": np.full((12, n), c0),
        "ocean": np.zeros((12, n)),
    }
    bu = BottomUpFluxes(times=native, fields=fields)
    return grid, part, build_basis(grid, part, periods, bu, {"gpp": 1, "resp": 1, "ocean": 1})


def test_x0_aggregates_constant_field_closed_form():
    c0 = 2.0e-8
    grid, part, basis = constant_world(c0)
    agg = basis.x0_aggregates("gpp")
    q = basis.layout.n_periods
    for r in (1, 2):
        expect = -c0 * grid.area[part.cells_in(r)].sum()
        for k in range(q):
            assert agg[(r - 1) * q + k] == pytest.approx(expect, rel=1e-12)


def test_aggregation_matrix_intercept_column_closed_form():
    c0 = 2.0e-8
    grid, part, basis = constant_world(c0)
    lay = basis.layout
    a = basis.aggregation_matrix("resp")
    col = lay.index("resp", 0, 2) - lay.component_offset("resp")
    region_total = c0 * grid.area[part.cells_in(2)].sum()
    q = lay.n_periods
    np.testing.assert_allclose(a[(2 - 1) * q:, col], region_total, rtol=1e-10)
    np.testing.assert_allclose(a[: (2 - 1) * q, col], 0.0)


def test_aggregation_matrix_matches_component_flux(toy):
    # the matrix path and a direct period-mean of the flux field must agree
    lay = toy.basis.layout
    rng = np.random.default_rng(8)
    for c in ("gpp", "resp", "ocean"):
        dim = lay.component_dim(c)
        alpha = rng.standard_normal(dim) * 0.3
        agg = toy.basis.x0_aggregates(c) + toy.basis.aggregation_matrix(c) @ alpha
        flux = toy.basis.component_flux(c, alpha, toy.basis.study_times)
        weighted = flux * toy.grid.area[:, None]
        qq = toy.basis.study_periods
        direct = np.zeros_like(agg)
        for r in range(1, lay.n_regions + 1):
            totals = weighted[toy.partition.cells_in(r)].sum(axis=0)
            for q in range(1, lay.n_periods + 1):
                direct[(r - 1) * lay.n_periods + (q - 1)] = totals[qq == q].mean()
        np.testing.assert_allclose(agg, direct, rtol=1e-10, atol=1e-16)


def test_linear_aggregates_are_area_weighted_coefficients(toy):
    b0, b1 = toy.basis.linear_aggregates("gpp")
    fit = toy.basis.fits["gpp"]
    for r in (1, 2, 3):
        cells = toy.partition.cells_in(r)
        assert b0[r - 1] == pytest.approx(
            float(np.dot(toy.grid.area[cells], fit.coefficient(0)[cells])))
        assert b1[r - 1] == pytest.approx(
            float(np.dot(toy.grid.area[cells], fit.coefficient(1)[cells])))


# -- provenance hash ---------------------------------------------------------


def test_content_hash_is_stable_and_input_sensitive(toy):
    again = make_toy_world()
    assert again.basis.content_hash() == toy.basis.content_hash()
    bumped = toy.bottomup.fields["gpp"].copy()
    bumped[0, 0] += 1e-12
    bu2 = BottomUpFluxes(times=toy.bottomup.times,
                         fields={**toy.bottomup.fields, "gpp": bumped})
    basis2 = build_basis(toy.grid, toy.partition, toy.periods, bu2,
                         {"gpp": 2, "resp": 2, "ocean": 1})
    assert basis2.content_hash() != toy.basis.content_hash()


def test_build_basis_requires_all_harmonic_counts(toy):
    with pytest.raises((DecompositionError, KeyError)):
        build_basis(toy.grid, toy.partition, toy.periods, toy.bottomup, {"gpp": 2})
