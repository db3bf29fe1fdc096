import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from regtransfer.errors import DivergentIntegralError
from regtransfer.fields import Grid, SampledField
from regtransfer.jump_models import (
    JumpModel,
    apply_generator,
    balance_report,
    big_jump_mass,
    build_ladder,
    compound_poisson,
    delta_probe,
    ellipticity,
    ladder_from_arrays,
    ladder_gamma,
    max_balanced_delta,
    modulated,
    one_sided_stable1d,
    rate_epsilon,
    small_jump_covariance,
    small_jump_remainder,
    stable1d,
    tempered_stable1d,
    uniform_jumps,
)
from regtransfer.weights import default_corpus

x = sp.Symbol("x1")
GRID = Grid.cube(10.0, 2001)


def field(expr):
    return SampledField.from_expr(expr, (x,), GRID)


def stable_cov(alpha, r):
    return 2 * r ** (2 - alpha) / (2 - alpha)


def stable_eps(alpha, r):
    return 2 * r ** (3 - alpha) / (3 - alpha)


class TestCovariance:
    def test_stable_closed_form(self):
        assert small_jump_covariance(stable1d(1.5), 0.5, 0.0)[0, 0] == pytest.approx(2.8284271247461903, rel=1e-10)

    @given(st.floats(0.2, 1.95), st.floats(1e-3, 4.0))
    @settings(max_examples=25, deadline=None)
    def test_stable_closed_form_any_index(self, alpha, r):
        got = small_jump_covariance(stable1d(alpha), r, 0.0)[0, 0]
        assert got == pytest.approx(stable_cov(alpha, r), rel=1e-8)

    def test_zero_coefficient(self):
        m = JumpModel("zero", density=lambda z: np.abs(z) ** -2.5, coeff=lambda z, xx: np.zeros((len(z), len(xx), 1)))
        assert small_jump_covariance(m, 1.0, 0.0)[0, 0] == 0.0

    def test_uniform_intensity(self):
        assert small_jump_covariance(uniform_jumps(), 1.0, 0.0)[0, 0] == pytest.approx(2 / 3, rel=1e-12)

    def test_non_integrable_singularity(self):
        m = JumpModel("cubic", density=lambda z: np.abs(z) ** -3.0)
        with pytest.raises(DivergentIntegralError):
            small_jump_covariance(m, 0.5, 0.0)

    @given(st.floats(0.01, 2.0), st.floats(1.01, 3.0))
    @settings(max_examples=20, deadline=None)
    def test_monotone_in_radius(self, r, factor):
        m = tempered_stable1d(1.2, 1.0)
        assert small_jump_covariance(m, r, 0.0)[0, 0] <= small_jump_covariance(m, r * factor, 0.0)[0, 0]

    def test_symmetric_psd_with_modulation(self):
        m = modulated(stable1d(1.5), lambda xx: 1 + 0.5 * np.sin(xx))
        A = small_jump_covariance(m, 0.5, m.default_probes())
        assert np.all(A >= 0)


class TestRateEpsilon:
    def test_stable_closed_form(self):
        assert rate_epsilon(stable1d(1.5), 0.5) == pytest.approx(0.4714045207910317, rel=1e-10)

    def test_empty_domain(self):
        assert rate_epsilon(stable1d(1.5), 0.0) == 0.0

    def test_modulated_coefficient_sup(self):
        base = rate_epsilon(stable1d(1.5), 0.5)
        m = modulated(stable1d(1.5), lambda xx: 1 + 0.5 * np.sin(xx))
        # the probe grid contains pi/2 where the modulation peaks at 3/2
        assert rate_epsilon(m, 0.5) / base == pytest.approx(3.375, rel=1e-12)


class TestEllipticity:
    def test_constant_scalar(self):
        assert ellipticity(0.7) == 0.7

    def test_oscillating_field(self):
        xs = np.linspace(-np.pi, np.pi, 65)
        assert ellipticity((1 + np.sin(xs) ** 2)[:, None, None]) == pytest.approx(1.0)

    def test_diagonal(self):
        assert ellipticity(np.diag([1.0, 2.0])) == 1.0

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            ellipticity(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestGenerator:
    def test_truncated_pure_gaussian(self):
        out = apply_generator(compound_poisson([]), "truncated", field(x**2), [[0.0], [1.3]], r=1.0, covariance=2.0)
        np.testing.assert_allclose(out, 2.0, rtol=1e-14)

    def test_full_unit_atom(self):
        out = apply_generator(compound_poisson([(1.0, 1.0)]), "full", field(x**2), [[0.0], [-2.0], [3.5]])
        np.testing.assert_allclose(out, 1.0, rtol=1e-12)

    @pytest.mark.parametrize("model", [stable1d(1.5), stable1d(0.7), tempered_stable1d(1.2, 2.0), uniform_jumps()])
    def test_linear_functions_annihilated(self, model):
        out = apply_generator(model, "full", field(3 * x - 1), [[-1.0], [0.5], [2.0]])
        np.testing.assert_allclose(out, 0.0, atol=1e-10)

    @pytest.mark.parametrize("r", [0.125, 0.5])
    def test_difference_is_small_jump_remainder(self, r):
        m = stable1d(1.5)
        f = field(sp.exp(-x**2))
        pts = np.linspace(-2, 2, 9)[:, None]
        full = apply_generator(m, "full", f, pts)
        trunc = apply_generator(m, "truncated", f, pts, r=r)
        np.testing.assert_allclose(full - trunc, small_jump_remainder(m, f, pts, r), atol=1e-10)

    def test_drift_term(self):
        m = JumpModel("drift", drift=lambda xx: 2.0 * np.ones_like(xx))
        np.testing.assert_allclose(apply_generator(m, "full", field(x**2), [[1.5]]), 6.0)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            apply_generator(stable1d(1.5), "half", field(x), [[0.0]])


class TestDeltaProbe:
    def test_linear_function(self):
        res = delta_probe(stable1d(1.5), 0.25, field(2 * x + 1))
        assert res.sup == pytest.approx(0.0, abs=1e-14)
        assert res.ratio == 0.0

    def test_gaussian_within_taylor_budget(self):
        res = delta_probe(stable1d(1.5), 0.25, field(sp.exp(-x**2)))
        assert 0 < res.ratio <= 1.0

    def test_one_sided_halving_scales_with_three_minus_alpha(self):
        m = one_sided_stable1d(1.5)
        f = field(sp.exp(-x**2))
        s = [delta_probe(m, 2.0**-k, f).sup for k in range(3, 8)]
        slope = np.polyfit(np.arange(3, 8), np.log2(s), 1)[0]
        assert slope == pytest.approx(-1.5, rel=0.01)

    def test_symmetric_halving_gains_an_extra_order(self):
        # odd third-order term cancels for symmetric intensities
        m = stable1d(1.5)
        f = field(sp.exp(-x**2))
        s = [delta_probe(m, 2.0**-k, f).sup for k in range(3, 8)]
        slope = np.polyfit(np.arange(3, 8), np.log2(s), 1)[0]
        assert slope == pytest.approx(-2.5, rel=0.01)


class TestLadder:
    def test_stable_ladder_constants_across_levels(self):
        ladder = build_ladder(stable1d(1.5), range(9))
        eps_c = [p.eps / p.r**1.5 for p in ladder]
        lam_c = [p.lam / p.r**0.5 for p in ladder]
        assert np.ptp(eps_c) / np.mean(eps_c) < 0.01
        assert np.ptp(lam_c) / np.mean(lam_c) < 0.01

    def test_gamma_bounds_adjacent_levels(self):
        ladder = build_ladder(stable1d(1.5), range(6))
        g = ladder_gamma(ladder)
        for p, q in zip(ladder[:-1], ladder[1:]):
            assert p.lam <= g * q.lam * (1 + 1e-12)
            assert q.Lambda <= g * p.Lambda

    def test_radii_must_decrease(self):
        with pytest.raises(ValueError):
            build_ladder(stable1d(1.5), [0, 0, 1])

    def test_big_jump_mass_closed_form(self):
        # 2 r^{-alpha} / alpha
        assert big_jump_mass(stable1d(1.5), 0.5) == pytest.approx(2 * 0.5**-1.5 / 1.5, rel=1e-10)


class TestBalance:
    def test_flat_ladder(self):
        rep = balance_report(ladder_from_arrays(np.ones(6), np.ones(6)), 0.5)
        np.testing.assert_allclose(rep.phi, 1.0)
        assert rep.verdict == "bounded"

    def test_exponent_algebra(self):
        theta0, a, b, delta = 0.5, 3.0, 0.0, 0.2
        lam = 2.0 ** -np.arange(8.0)
        eps = lam ** (theta0 * (a + b + 2 * delta))
        rep = balance_report(ladder_from_arrays(eps, lam), theta0, a, b, delta)
        np.testing.assert_allclose(rep.phi, lam ** (theta0 * delta), rtol=1e-12)
        assert rep.verdict == "bounded"

    @pytest.mark.parametrize("theta0,delta", [(0.5, 0.1), (0.5, 1.0), (2.0, 0.1)])
    def test_stable_ladder_slope(self, theta0, delta):
        alpha = 1.5
        rep = balance_report(build_ladder(stable1d(alpha), range(9)), theta0, 3.0, 0.0, delta)
        expected = -(3 - alpha) + (2 - alpha) * theta0 * (3 + delta)
        assert rep.slope == pytest.approx(expected, rel=0.02)
        assert rep.growth_ok

    def test_unbounded_verdict(self):
        rep = balance_report(build_ladder(stable1d(1.5), range(9)), 2.0, 3.0, 0.0, 0.1)
        assert rep.verdict == "unbounded"

    def test_too_short(self):
        with pytest.raises(ValueError):
            balance_report(ladder_from_arrays([1, 1], [1, 1]), 0.5)

    def test_zero_ellipticity(self):
        with pytest.raises(ValueError):
            balance_report(ladder_from_arrays(np.ones(4), [1, 1, 0, 1]), 0.5)

    def test_max_balanced_delta_matches_slope_root(self):
        ladder = build_ladder(stable1d(1.5), range(9))
        d = max_balanced_delta(ladder, 0.5)
        # -(3-alpha) + (2-alpha) theta0 (3 + delta) = 0
        assert d == pytest.approx(1.5 / 0.25 - 3, rel=1e-9)

    @given(st.lists(st.floats(0.1, 10.0), min_size=4, max_size=10), st.floats(0.1, 2.0), st.floats(0.0, 1.0))
    @settings(max_examples=40)
    def test_growth_bound_holds_for_any_ladder(self, lam, theta0, delta):
        lam = np.sort(lam)[::-1]
        eps = lam**1.3
        rep = balance_report(ladder_from_arrays(eps, lam), theta0, 3.0, 0.0, delta)
        assert rep.growth_ok


class TestCorpusDeltaProbe:
    def test_ratio_within_budget_on_corpus(self):
        m = stable1d(1.5)
        for name, e, sym in default_corpus():
            res = delta_probe(m, 0.25, field(e.subs(sym[0], x)))
            assert res.ratio <= 1.05, name
