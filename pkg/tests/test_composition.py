import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from regtransfer.composition import (
    ChainOperator,
    KernelChain,
    SpectralGrid,
    commuting_pair,
    compose_kernels,
    composed_bound_probe,
    default_lindeberg_corpus,
    fits_to_csv,
    lindeberg_terms,
    ou_brownian_pair,
    remainder_estimate,
    remainder_order,
)
from regtransfer.density_lab import HeatKernel, OUKernel
from regtransfer.fields import Grid

XY = Grid((-3.0, -6.0), (3.0, 6.0), (13, 121))
X, Y = XY.axes
HEAT = HeatKernel()
CORPUS = default_lindeberg_corpus()
COUPLINGS = [0.2, 0.1, 0.05, 0.025]


def heat_matrix(t, shift=0.0):
    return HeatKernel(t=t).dxdy(0, 0, X[:, None] + shift, Y[None, :])


class TestKernelChain:
    def test_pigeonhole_index(self):
        assert KernelChain(HEAT, [0.1, 0.5, 0.4]).pigeonhole == 1

    def test_rejects_nonpositive_duration(self):
        with pytest.raises(ValueError):
            KernelChain(HEAT, [0.5, 0.0])

    def test_rejects_operator_count(self):
        with pytest.raises(ValueError):
            KernelChain([HEAT, HEAT], [0.5, 0.5], [ChainOperator(), ChainOperator()])

    def test_unknown_operator(self):
        with pytest.raises(ValueError):
            ChainOperator("rotate")

    def test_scaling_keeps_fractions(self):
        c = KernelChain(HEAT, [0.2, 0.6]).scaled(2.0)
        assert c.durations == pytest.approx([0.5, 1.5])


class TestComposeKernels:
    def test_single_link_is_the_kernel(self):
        k = compose_kernels(KernelChain(HEAT, [0.7]), XY)
        np.testing.assert_array_equal(k.values, heat_matrix(0.7))
        assert k.quad_error == 0.0

    @pytest.mark.parametrize("durations", [[0.3, 0.5], [0.1, 0.9], [0.2, 0.3, 0.5]])
    def test_chapman_kolmogorov(self, durations):
        k = compose_kernels(KernelChain(HEAT, durations), XY)
        assert np.max(np.abs(k.values - heat_matrix(sum(durations)))) < 1e-8

    def test_shift_between_links(self):
        chain = KernelChain(HEAT, [0.3, 0.5], [ChainOperator("shift", 1.0)])
        k = compose_kernels(chain, XY)
        assert np.max(np.abs(k.values - heat_matrix(0.8, shift=1.0))) < 1e-8

    def test_second_order_operator_is_time_derivative(self):
        # S_a (1/2 d^2) S_b = d/dt S_t at t = a + b for the heat semigroup
        chain = KernelChain(HEAT, [0.4, 0.4], [ChainOperator("second", 1.0)])
        k = compose_kernels(chain, XY)
        h = 1e-4
        fd = (heat_matrix(0.8 + h) - heat_matrix(0.8 - h)) / (2 * h)
        assert np.max(np.abs(k.values - fd)) < 1e-7

    def test_mixed_ou_heat_chain_mass(self):
        grid = Grid((-2.0, -12.0), (2.0, 12.0), (5, 2401))
        chain = KernelChain([OUKernel(theta=0.5), HEAT], [0.4, 0.6])
        k = compose_kernels(chain, grid)
        mass = np.trapezoid(k.values, dx=grid.spacing[1], axis=1)
        np.testing.assert_allclose(mass, 1.0, atol=1e-6)

    @settings(max_examples=10, deadline=None)
    @given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=3))
    def test_identity_chains_conserve_mass(self, durations):
        grid = Grid((-2.0, -15.0), (2.0, 15.0), (5, 3001))
        k = compose_kernels(KernelChain(HEAT, durations), grid)
        mass = np.trapezoid(k.values, dx=grid.spacing[1], axis=1)
        np.testing.assert_allclose(mass, 1.0, atol=1e-6)

    def test_derivative_in_x(self):
        k = compose_kernels(KernelChain(HEAT, [0.3, 0.5]), XY, a=1)
        exact = HeatKernel(t=0.8).dxdy(1, 0, X[:, None], Y[None, :])
        assert np.max(np.abs(k.values - exact)) < 1e-8

    def test_too_many_links(self):
        with pytest.raises(ValueError):
            compose_kernels(KernelChain(HEAT, [0.25] * 4), XY)

    def test_needs_product_grid(self):
        with pytest.raises(ValueError):
            compose_kernels(KernelChain(HEAT, [0.5, 0.5]), Grid.cube(3.0, 11))


class TestBoundProbe:
    def test_single_heat_link_within_budget(self):
        r = composed_bound_probe(KernelChain(HEAT, [1.0]), q1=1, q2=1, kappa=0.0, p=2.0)
        assert r.finite
        assert abs(r.slope) <= 0.5 * (1 + 1 + 1 + 2 * 1.0)
        assert r.within

    def test_two_links_within_budget(self):
        r = composed_bound_probe(KernelChain(HEAT, [0.5, 0.5]), q1=1, q2=1, kappa=0.0, p=2.0,
                                 t_grid=np.geomspace(0.1, 1.0, 4))
        assert r.finite and r.within
        assert r.budget == pytest.approx(2.5)

    def test_norm_finite_on_ladder(self):
        r = composed_bound_probe(KernelChain(HEAT, [1.0]), q1=0, q2=0, kappa=1.0, p=2.0)
        assert np.all(np.isfinite(r.M)) and np.all(r.M > 0)
        assert len(r.rows()) == len(r.t)


class TestLindebergTerms:
    @pytest.mark.parametrize("m", [1, 2])
    def test_commuting_terms_closed_form(self, m):
        pair = commuting_pair(1.0, 0.9)
        sg = SpectralGrid()
        f = CORPUS[0][1]
        exp = lindeberg_terms(pair, 1.0, 3, f, sg)
        h = pair.approx.apply(f(sg.x), 1.0, sg)
        for _ in range(m):
            h = pair.delta.apply(h, sg)
        assert np.max(np.abs(exp.terms[m] - h / math.factorial(m))) < 1e-6

    def test_zeroth_term_is_approximating_semigroup(self):
        pair = ou_brownian_pair(0.3)
        sg = SpectralGrid()
        f = CORPUS[1][1]
        exp = lindeberg_terms(pair, 1.0, 1, f, sg)
        np.testing.assert_array_equal(exp.terms[0], pair.approx.apply(f(sg.x), 1.0, sg))

    def test_doubling_quadrature_order_is_converged(self):
        pair = commuting_pair(1.0, 0.9)
        f = CORPUS[2][1]
        a = lindeberg_terms(pair, 1.0, 3, f, order=16)
        b = lindeberg_terms(pair, 1.0, 3, f, order=32)
        assert max(np.max(np.abs(u - v)) for u, v in zip(a.terms, b.terms)) < 1e-8

    def test_kernel_mode_columns_are_densities(self):
        sg = SpectralGrid(L=16.0, N=256)
        exp = lindeberg_terms(commuting_pair(), 1.0, 1, None, sg)
        cols = exp.terms[0].sum(axis=0) * sg.dx
        np.testing.assert_allclose(cols, 1.0, atol=1e-10)
        assert exp.term_fields()[0].values.shape == (256, 256)

    def test_depth_limits(self):
        with pytest.raises(ValueError):
            lindeberg_terms(commuting_pair(), 1.0, 4, CORPUS[0][1])
        with pytest.raises(ValueError):
            lindeberg_terms(commuting_pair(), 1.0, 0, CORPUS[0][1])


class TestRemainder:
    def test_no_coupling_no_remainder(self):
        rem = remainder_estimate(commuting_pair(1.0, 1.0), 1.0, 2, CORPUS)
        assert all(v == 0.0 for v in rem.values())

    @pytest.mark.parametrize("family", [lambda c: commuting_pair(1.0, 1.0 - c), ou_brownian_pair],
                             ids=["commuting", "ou-brownian"])
    @pytest.mark.parametrize("m0", [1, 2])
    def test_order_matches_depth(self, family, m0):
        fits = remainder_order(family, COUPLINGS, 1.0, m0, CORPUS, normalise="l2")
        for f in fits:
            assert f.order == pytest.approx(m0, abs=0.2), f.name

    def test_ou_depth_two_within_fifteen_percent(self):
        fits = remainder_order(ou_brownian_pair, COUPLINGS, 1.0, 2, CORPUS)
        for f in fits:
            assert f.order == pytest.approx(2.0, rel=0.15)

    def test_order_increases_with_depth(self):
        family = lambda c: commuting_pair(1.0, 1.0 - c)
        orders = [np.mean([f.order for f in remainder_order(family, COUPLINGS, 1.0, m0, CORPUS)])
                  for m0 in (1, 2, 3)]
        assert orders[0] < orders[1] < orders[2]

    def test_csv(self):
        fits = remainder_order(ou_brownian_pair, COUPLINGS[:2], 1.0, 1, CORPUS[:1])
        lines = fits_to_csv(fits).splitlines()
        assert lines[0] == "function,m0,coupling,remainder,order"
        assert len(lines) == 3
