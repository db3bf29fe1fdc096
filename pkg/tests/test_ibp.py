import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from regtransfer.errors import SingularMatrixError
from regtransfer.fields import Grid, SampledField
from regtransfer.ibp_engine import (
    DiffeoField,
    complexity_constant,
    h_operator,
    identity_map,
    pullback_norm_probe,
    sigma_gamma,
    verify_ibp,
)

x = sp.Symbol("x1")
GRID = Grid.cube(10.0, 4001)
SINE = DiffeoField([x + sp.sin(x) / 10], (x,))
TWO = DiffeoField([2 * x], (x,))
IDENT = identity_map()


def field(expr, grid=GRID):
    return SampledField.from_expr(expr, (x,), grid)


F = field(sp.exp(-(x - sp.Rational(1, 2)) ** 2 / 2))
G = field(sp.exp(-x**2) * (1 + x))


class TestSigmaGamma:
    def test_identity_is_unit(self):
        s, g = sigma_gamma(IDENT, [0.7])
        assert s[0, 0] == 1.0 and g[0, 0] == 1.0

    def test_doubling_map(self):
        s, g = sigma_gamma(TWO, [-1.3])
        assert s[0, 0] == pytest.approx(4.0) and g[0, 0] == pytest.approx(0.25)

    def test_sine_perturbation_ellipticity(self):
        # closed form (1 + cos(x)/10)^2, infimum (0.9)^2 at x = pi
        assert SINE.epsilon == pytest.approx(0.81, abs=1e-6)
        assert SINE.epsilon >= 0.81 - 1e-12
        s, _ = sigma_gamma(SINE, [0.4])
        assert s[0, 0] == pytest.approx((1 + np.cos(0.4) / 10) ** 2, rel=1e-14)

    def test_two_dimensional_rotation_scaling(self):
        x1, x2 = sp.symbols("x1 x2")
        phi = DiffeoField([x1 + x2, x1 - x2], (x1, x2), Grid.cube(1.0, 5, 2))
        s, g = sigma_gamma(phi, [0.1, 0.2])
        np.testing.assert_allclose(s, 2 * np.eye(2), atol=1e-14)
        np.testing.assert_allclose(g, 0.5 * np.eye(2), atol=1e-14)

    def test_singular_map_raises(self):
        flat = DiffeoField([x**3], (x,))
        with pytest.raises(SingularMatrixError):
            sigma_gamma(flat, [0.0])

    def test_hat_is_norm_at_origin(self):
        assert DiffeoField([x + 3], (x,)).hat == pytest.approx(3.0)


class TestHOperator:
    def test_identity_gives_minus_derivative(self):
        H = h_operator(IDENT, G, (1,))
        np.testing.assert_allclose(H.values, -G.derivative((1,)), atol=1e-12)

    def test_doubling_halves_derivative(self):
        H = h_operator(TWO, G, (1,))
        np.testing.assert_allclose(H.values, -G.derivative((1,)) / 2, atol=1e-12)

    def test_zero_weight(self):
        H = h_operator(SINE, field(sp.Integer(0) * x), (1, 1))
        assert np.all(H.values == 0)

    def test_recursion_matches_iterated_index(self):
        once = h_operator(SINE, G, (1,))
        twice = h_operator(SINE, once, (1,))
        direct = h_operator(SINE, G, (1, 1))
        np.testing.assert_allclose(twice.values, direct.values, atol=1e-12)

    def test_recursion_with_finite_differences(self):
        gv = SampledField.from_values(G.values, GRID, fd_accuracy=4)
        once = h_operator(SINE, gv, (1,))
        twice = h_operator(SINE, once, (1,))
        direct = h_operator(SINE, G, (1, 1))
        inner = slice(20, -20)
        np.testing.assert_allclose(twice.values[inner], direct.values[inner], atol=1e-6)

    def test_fd_fallback_agrees_with_symbolic(self):
        gv = SampledField.from_values(G.values, GRID, fd_accuracy=4)
        diff = h_operator(SINE, gv, (1,)).values - h_operator(SINE, G, (1,)).values
        assert np.max(np.abs(diff)) < 1e-7

    def test_order_cap(self):
        with pytest.raises(ValueError):
            h_operator(SINE, G, (1, 1, 1, 1))

    def test_singular_grid_raises(self):
        with pytest.raises(SingularMatrixError):
            h_operator(DiffeoField([x**3], (x,)), G, (1,))

    def test_two_dimensional_identity(self):
        x1, x2 = sp.symbols("x1 x2")
        grid = Grid.cube(5.0, 61, 2)
        phi = DiffeoField([x1, x2], (x1, x2), grid)
        g = SampledField.from_expr(sp.exp(-x1**2 - 2 * x2**2) * (1 + x1 * x2), (x1, x2), grid)
        H = h_operator(phi, g, (2,))
        np.testing.assert_allclose(H.values, -g.evaluate((0, 1), grid.points()), atol=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(0.5, 2), st.floats(-1.5, 1.5))
    def test_linear_in_weight(self, a, b, w, c):
        g1 = sp.exp(-x**2 / w)
        g2 = sp.exp(-(x - c) ** 2) * sp.cos(x)
        grid = Grid.cube(6.0, 401)
        lhs = h_operator(SINE, field(a * g1 + b * g2, grid), (1, 1)).values
        rhs = a * h_operator(SINE, field(g1, grid), (1, 1)).values + b * h_operator(SINE, field(g2, grid), (1, 1)).values
        np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=1e-12)


class TestVerifyIBP:
    def test_classical_identity(self):
        assert verify_ibp(IDENT, F, G, (1,)).residual < 1e-8

    @pytest.mark.parametrize("alpha,tol", [((1,), 1e-6), ((1, 1), 1e-5), ((1, 1, 1), 1e-5)])
    def test_sine_diffeo(self, alpha, tol):
        res = verify_ibp(SINE, F, G, alpha)
        assert res.residual < tol
        assert abs(res.lhs) > 1e-3

    def test_support_touching_boundary_rejected(self):
        wide = field(sp.exp(-x**2 / 50))
        with pytest.raises(ValueError):
            verify_ibp(SINE, F, wide, (1,))

    def test_residual_halves_at_least_fourfold_under_refinement(self):
        # values-only weights go through finite differences; spectral trapezoid leaves the FD error
        res = []
        for n in (201, 401):
            grid = Grid.cube(10.0, n)
            f = field(sp.exp(-(x - sp.Rational(1, 2)) ** 2 / 2), grid)
            g_exact = field(sp.exp(-x**2) * (1 + x), grid)
            gv = SampledField.from_values(g_exact.values, grid, fd_accuracy=4)
            res.append(verify_ibp(SINE, f, gv, (1,)).residual)
        assert res[1] <= res[0] / 4


class TestComplexityConstant:
    def test_identity(self):
        assert complexity_constant(IDENT, 2) == 1.0

    def test_doubling(self):
        assert complexity_constant(TWO, 1) == pytest.approx(2.0)

    def test_sine_stable_under_refinement(self):
        coarse = complexity_constant(SINE, 1)
        fine = complexity_constant(SINE, 1, Grid.cube(4 * np.pi, 8001).points())
        assert np.isfinite(coarse)
        assert fine == pytest.approx(coarse, rel=1e-4)

    def test_field_mode_shape(self):
        pts = Grid.cube(2.0, 11).points()
        assert complexity_constant(SINE, 0, pts, field=True).shape == (11,)


class TestPullbackProbe:
    def test_identity_ratio_at_most_one(self):
        rep = pullback_norm_probe(IDENT, mode="ip10", q=1, kappa=1.0)
        assert rep.budget_factor == pytest.approx(1.0)
        assert rep.ratio <= 1.0 + 1e-12

    def test_shift_budget_is_weight_at_shifted_origin(self):
        rep = pullback_norm_probe(DiffeoField([x + 1], (x,)), mode="ip10", q=1, kappa=1.0)
        assert rep.budget_factor == pytest.approx(2.0)
        assert rep.finite

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            pullback_norm_probe(IDENT, mode="ip99")

    def test_ip6_stable_under_refinement(self):
        a = pullback_norm_probe(SINE, mode="ip6", q=1, grid=Grid.cube(10.0, 2001)).ratio
        b = pullback_norm_probe(SINE, mode="ip6", q=1, grid=Grid.cube(10.0, 4001)).ratio
        assert np.isfinite(a) and b == pytest.approx(a, rel=1e-3)

    def test_ip12_growth_slower_than_ellipticity_budget(self):
        q, p = 1, 2.0
        cs = np.array([1.0, 0.5, 0.25, 0.125])
        measured, eps = [], []
        for c in cs:
            phi = DiffeoField([c * x], (x,))
            rep = pullback_norm_probe(phi, mode="ip12", q=q, kappa=0.0, p=p)
            measured.append(rep.ratio * rep.budget_factor)
            eps.append(phi.epsilon)
        slope = np.polyfit(np.log(eps), np.log(measured), 1)[0]
        assert -slope <= q * (q + 1) + 1 / 2
