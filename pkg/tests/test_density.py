"""Gridded densities, kernel estimates and overlap metrics."""

import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from bhmoi.density import (
    GriddedDensity,
    SampleSet,
    SupportGrid,
    build_common_grid,
    density_from_samples,
    mixture_mean,
    ovl,
    silverman_bandwidth,
    total_variation,
)

from conftest import normal_density


class TestSupportGrid:
    def test_step_is_derived(self):
        g = SupportGrid(-1.0, 2.0, 31)
        assert g.step == 3.0 / 30
        np.testing.assert_allclose(np.diff(g.t), g.step, rtol=1e-12)

    @pytest.mark.parametrize("lower,upper,points", [(1.0, 1.0, 32), (2.0, 1.0, 32), (0.0, 1.0, 15)])
    def test_rejects_invalid(self, lower, upper, points):
        with pytest.raises(ValueError):
            SupportGrid(lower, upper, points)

    def test_trapezoid_weights_integrate_linear_exactly(self):
        g = SupportGrid(0.0, 2.0, 17)
        assert g.integrate(3.0 * g.t + 1.0) == pytest.approx(8.0, abs=1e-12)

    def test_integer_grid_uses_unit_weights(self):
        g = SupportGrid.integers(0, 5)
        assert g.points == 6 and g.discrete
        np.testing.assert_array_equal(g.weights, np.ones(6))


class TestGriddedDensity:
    def test_renormalized(self, unit_grid):
        d = GriddedDensity(unit_grid, 5.0 * stats.norm.pdf(unit_grid.t))
        assert d.mass == pytest.approx(1.0, abs=1e-6)

    def test_values_read_only(self, unit_grid):
        d = normal_density(unit_grid, 0.0)
        with pytest.raises(ValueError):
            d.values[0] = 1.0

    @pytest.mark.parametrize("bad", [np.full(512, -1.0), np.zeros(512), np.full(512, np.nan), np.ones(10)])
    def test_rejects_invalid_values(self, unit_grid, bad):
        with pytest.raises(ValueError):
            GriddedDensity(unit_grid, bad)


class TestBuildCommonGrid:
    def test_no_sample_sets(self):
        with pytest.raises(ValueError, match="no sample sets"):
            build_common_grid([])

    def test_zero_spread_is_widened(self):
        s = SampleSet(np.zeros(50), "a")
        g = build_common_grid([s, s], points=16, extension=0.0)
        assert g.lower == pytest.approx(-1e-6) and g.upper == pytest.approx(1e-6)

    def test_envelope_without_extension(self):
        a = SampleSet(np.linspace(0.0, 1.0, 100))
        b = SampleSet(np.linspace(2.0, 3.0, 100))
        g = build_common_grid([a, b], points=512, extension=0.0)
        assert (g.lower, g.upper, g.points) == (0.0, 3.0, 512)

    def test_extension_matches_direct_scan(self):
        rng = np.random.default_rng(7)
        x = rng.normal(0, 1, 10_000)
        y = rng.normal(5, 1, 10_000)
        g = build_common_grid([SampleSet(x), SampleSet(y)], points=512, extension=3.0)
        pooled = np.concatenate([x, y])
        sd = pooled.std(ddof=1)
        iqr = np.subtract(*np.percentile(pooled, [75, 25])) / 1.34
        h = 0.9 * min(sd, iqr) * pooled.size ** -0.2
        assert g.lower == pytest.approx(pooled.min() - 3 * h, rel=1e-12)
        assert g.upper == pytest.approx(pooled.max() + 3 * h, rel=1e-12)


class TestDensityFromSamples:
    def test_recovers_standard_normal(self):
        x = np.random.default_rng(1).normal(size=100_000)
        d = density_from_samples(SampleSet(x), SupportGrid(-5, 5, 512))
        assert np.max(np.abs(d.values - stats.norm.pdf(d.grid.t))) < 0.02

    def test_matches_scipy_kde_at_same_bandwidth(self):
        x = np.random.default_rng(2).gamma(3.0, 1.0, 2_000)
        grid = SupportGrid(-2.0, 16.0, 1024)
        h = silverman_bandwidth(x)
        ours = density_from_samples(SampleSet(x), grid, bandwidth=h).values
        ref = stats.gaussian_kde(x, bw_method=h / x.std(ddof=1))(grid.t)
        ref /= grid.integrate(ref)
        assert np.max(np.abs(ours - ref)) < 2e-3

    def test_symmetric_draws_give_symmetric_density(self):
        x = np.random.default_rng(3).normal(size=5000)
        d = density_from_samples(SampleSet(np.concatenate([x, -x])), SupportGrid(-6, 6, 513))
        np.testing.assert_allclose(d.values, d.values[::-1], atol=1e-12)

    def test_bandwidth_below_grid_step_keeps_mass(self):
        x = np.random.default_rng(4).normal(0.5, 1e-4, 1000)
        d = density_from_samples(SampleSet(x), SupportGrid(0.0, 1.0, 64))
        assert d.mass == pytest.approx(1.0, abs=1e-6)
        assert d.values.argmax() in (31, 32)

    def test_degenerate_sample_flags_spike(self):
        s = SampleSet(np.full(100, 0.3))
        grid = build_common_grid([s], points=16)
        with pytest.warns(UserWarning, match="zero spread"):
            d = density_from_samples(s, grid)
        assert d.degenerate
        assert d.mass == pytest.approx(1.0, abs=1e-6)

    def test_discrete_branch_is_relative_frequency(self):
        draws = np.array([0, 1, 1, 2, 2, 2, 3, 3, 3, 3])
        d = density_from_samples(SampleSet(draws), SupportGrid.integers(0, 4))
        np.testing.assert_allclose(d.values, [0.1, 0.2, 0.3, 0.4, 0.0])

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=200))
    def test_output_always_normalized(self, xs):
        s = SampleSet(np.array(xs))
        grid = build_common_grid([s], points=64)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            d = density_from_samples(s, grid)
        assert d.mass == pytest.approx(1.0, abs=1e-6)


class TestOverlap:
    def test_self_overlap_is_one(self, unit_grid):
        f = normal_density(unit_grid, 1.0)
        assert ovl(f, f) == pytest.approx(1.0, abs=1e-9)
        assert total_variation(f, f) == pytest.approx(0.0, abs=1e-9)

    def test_disjoint_uniforms(self):
        grid = SupportGrid(-0.5, 3.5, 801)
        f = GriddedDensity(grid, ((grid.t >= 0) & (grid.t <= 1)).astype(float))
        g = GriddedDensity(grid, ((grid.t >= 2) & (grid.t <= 3)).astype(float))
        assert ovl(f, g) == pytest.approx(0.0, abs=1e-9)
        assert total_variation(f, g) == pytest.approx(1.0, abs=1e-9)

    def test_equal_variance_normals_match_closed_form(self, unit_grid):
        f, g = normal_density(unit_grid, 0.0), normal_density(unit_grid, 1.0)
        expected = 2 * stats.norm.cdf(-0.5)
        assert ovl(f, g) == pytest.approx(expected, abs=1e-3)
        assert total_variation(f, g) == pytest.approx(1 - expected, abs=1e-3)

    def test_unequal_variance_normals_match_quadrature(self, unit_grid):
        f, g = normal_density(unit_grid, 0.0, 0.7), normal_density(unit_grid, 1.5, 1.3)
        ref, _ = integrate.quad(
            lambda t: min(stats.norm.pdf(t, 0.0, 0.7), stats.norm.pdf(t, 1.5, 1.3)), -6, 8, limit=200, points=[0.5, 1.0]
        )
        assert ovl(f, g) == pytest.approx(ref, abs=1e-3)

    def test_binomial_pmfs_sum_of_minima(self):
        grid = SupportGrid.integers(0, 20)
        k = np.arange(21)
        f = GriddedDensity(grid, stats.binom.pmf(k, 20, 0.3))
        g = GriddedDensity(grid, stats.binom.pmf(k, 20, 0.45))
        ref = np.minimum(stats.binom.pmf(k, 20, 0.3), stats.binom.pmf(k, 20, 0.45)).sum()
        assert ovl(f, g) == pytest.approx(ref, abs=1e-12)

    def test_grid_mismatch(self, unit_grid):
        f = normal_density(unit_grid, 0.0)
        g = normal_density(SupportGrid(-6.0, 8.0, 256), 0.0)
        with pytest.raises(ValueError, match="grid mismatch"):
            ovl(f, g)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(st.floats(-3, 5), st.floats(0.1, 3)), min_size=3, max_size=3))
    def test_symmetry_range_and_triangle(self, params):
        grid = SupportGrid(-6.0, 8.0, 512)
        f, g, h = (normal_density(grid, m, s) for m, s in params)
        assert abs(ovl(f, g) - ovl(g, f)) <= 1e-12
        for a, b in ((f, g), (g, h), (f, h)):
            assert 0.0 <= ovl(a, b) <= 1.0
            assert 0.0 <= total_variation(a, b) <= 1.0
            assert total_variation(a, b) == 1.0 - ovl(a, b)
        assert total_variation(f, h) <= total_variation(f, g) + total_variation(g, h) + 2e-6


class TestMixtureMean:
    def test_singleton_is_identity(self, unit_grid):
        f = normal_density(unit_grid, 0.0)
        assert mixture_mean([f]) is f

    def test_idempotent(self, unit_grid):
        f = normal_density(unit_grid, 0.0)
        np.testing.assert_allclose(mixture_mean([f, f]).values, f.values, atol=1e-15)

    def test_two_component_mixture(self, unit_grid):
        m = mixture_mean([normal_density(unit_grid, -1.0), normal_density(unit_grid, 1.0)])
        t = unit_grid.t
        expected = 0.5 * (stats.norm.pdf(t + 1) + stats.norm.pdf(t - 1))
        assert np.max(np.abs(m.values - expected)) < 1e-3
        assert m.mass == pytest.approx(1.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError, match="empty cluster"):
            mixture_mean([])
