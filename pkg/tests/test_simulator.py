import numpy as np
import pytest

from regtransfer.density_lab import HeatKernel, kde_estimate, l1_distance
from regtransfer.distance_lab import TestFunctionDictionary, dk_lower
from regtransfer.errors import QuadratureError
from regtransfer.jump_models import JumpModel, build_ladder, compound_poisson, one_sided_stable1d, stable1d
from regtransfer.simulator import (
    BigJumpSampler,
    BrownianBase,
    OUBase,
    PerturbationSpec,
    SampleCloud,
    SimConfig,
    normal_marks,
    simulate_approx_paths,
    simulate_perturbed,
)

GAUSS = JumpModel("gauss")


def clt_band(var, N, k=3.0):
    return k * np.sqrt(var / N)


class TestSimConfig:
    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            SimConfig(dt=0.0)

    def test_rejects_empty_cloud(self):
        with pytest.raises(ValueError):
            SimConfig(N=0)

    def test_rejects_fractional_step_count(self):
        with pytest.raises(ValueError):
            SimConfig(t=1.0, dt=0.3)

    def test_tolerates_rounding_in_step_count(self):
        assert SimConfig(t=0.3, dt=0.1).steps == 3

    def test_unknown_compensation(self):
        with pytest.raises(ValueError):
            SimConfig(compensation="sometimes")


class TestApproxPaths:
    def test_no_noise_no_jumps_stays_put(self):
        cloud = simulate_approx_paths(GAUSS, None, [0.7], SimConfig(N=50, dt=0.1))
        assert np.all(cloud.endpoints == 0.7)

    def test_unit_covariance_variance(self):
        N = 40_000
        cloud = simulate_approx_paths(GAUSS, None, [0.0], SimConfig(N=N, dt=0.05, seed=11), covariance=[[1.0]])
        # var of the sample variance of N(0,1) is 2/N
        assert abs(np.var(cloud.endpoints, ddof=1) - 1.0) < clt_band(2.0, N)

    def test_poisson_unit_jumps_mean_displacement(self):
        N = 40_000
        model = compound_poisson([(1.0, 1.0)])
        cfg = SimConfig(N=N, dt=0.05, seed=5, compensation="none")
        # level 1 puts the cutoff at 1/2, so the +1 atom is a big jump
        cloud = simulate_approx_paths(model, 1, [0.0], cfg)
        assert abs(np.mean(cloud.endpoints) - 1.0) < clt_band(1.0, N)

    def test_compensated_poisson_is_centred(self):
        N = 40_000
        model = compound_poisson([(1.0, 1.0)])
        cloud = simulate_approx_paths(model, 1, [0.0], SimConfig(N=N, dt=0.05, seed=5, compensation="compensated"))
        assert abs(np.mean(cloud.endpoints)) < clt_band(1.0, N)

    def test_independent_of_worker_count(self):
        model = stable1d(1.5)
        base = dict(N=5000, dt=0.05, seed=42, chunk=700)
        a = simulate_approx_paths(model, 3, [0.0], SimConfig(workers=1, **base))
        b = simulate_approx_paths(model, 3, [0.0], SimConfig(workers=4, **base))
        assert a.to_csv() == b.to_csv()

    def test_seed_changes_cloud(self):
        model = stable1d(1.5)
        a = simulate_approx_paths(model, 2, [0.0], SimConfig(N=200, dt=0.1, seed=1))
        b = simulate_approx_paths(model, 2, [0.0], SimConfig(N=200, dt=0.1, seed=2))
        assert not np.array_equal(a.endpoints, b.endpoints)

    def test_provenance_records_level_and_seed(self):
        cloud = simulate_approx_paths(stable1d(1.5), 2, [0.0], SimConfig(N=10, dt=0.5, seed=9))
        assert cloud.provenance["level"] == 2 and cloud.provenance["seed"] == 9

    def test_noncompensable_model_rejected_when_forced(self):
        with pytest.raises(QuadratureError):
            simulate_approx_paths(stable1d(0.8), 1, [0.0], SimConfig(N=10, dt=0.5, compensation="compensated"))

    def test_infinite_big_jump_mass_rejected(self):
        # density with a non-integrable tail at infinity
        heavy = JumpModel("heavy", density=lambda z: np.abs(z) ** -0.5, finite_first_moment=False)
        with pytest.raises(QuadratureError):
            simulate_approx_paths(heavy, 1, [0.0], SimConfig(N=10, dt=0.5))


class TestBigJumpSampler:
    def test_atoms_beyond_cutoff_sampled_exactly(self):
        model = compound_poisson([(2.0, 1.0), (-3.0, 3.0), (0.1, 5.0)])
        s = BigJumpSampler(model, 0.5)
        z = s.sample(np.linspace(0.001, 0.999, 4000))
        assert set(np.unique(z)) == {2.0, -3.0}
        assert np.mean(z == -3.0) == pytest.approx(0.75, abs=1e-3)

    def test_stable_tail_law(self):
        # P(|Z| > z | |Z| > r) = (z/r)^{-alpha}
        alpha, r = 1.5, 0.5
        s = BigJumpSampler(stable1d(alpha), r)
        u = (np.arange(200_000) + 0.5) / 200_000
        z = np.abs(s.sample(u))
        for q in (1.0, 2.0, 5.0):
            assert np.mean(z > q) == pytest.approx((q / r) ** -alpha, rel=2e-3)


class TestPerturbed:
    def test_zero_rate_matches_base(self):
        cfg = SimConfig(N=2000, t=1.0, dt=1.0, seed=3)
        a = simulate_perturbed(PerturbationSpec(0.0, lambda z, x: x + z), [0.0], cfg)
        b = simulate_perturbed(PerturbationSpec(0.0, lambda z, x: x + 100 * z), [0.0], cfg)
        np.testing.assert_array_equal(a.endpoints, b.endpoints)

    def test_identity_map_keeps_base_law(self):
        N = 40_000
        cfg = SimConfig(N=N, t=1.0, dt=1.0, seed=8)
        cloud = simulate_perturbed(PerturbationSpec(5.0, lambda z, x: x), [0.0], cfg)
        assert abs(np.var(cloud.endpoints, ddof=1) - 1.0) < clt_band(2.0, N)

    def test_brownian_with_normal_shifts_variance(self):
        N = 100_000
        spec = PerturbationSpec(2.0, lambda z, x: x + z, normal_marks(1.0), BrownianBase(1.0))
        cloud = simulate_perturbed(spec, [0.0], SimConfig(N=N, t=1.0, dt=1.0, seed=21))
        # cumulants k2 = 3, k4 = rate * E z^4 = 6, so var(s^2) ~ (k4 + 2 k2^2) / N
        band = clt_band(6.0 + 2 * 9.0, N)
        assert abs(np.var(cloud.endpoints, ddof=1) - 3.0) < band

    def test_every_path_has_one_endpoint(self):
        cloud = simulate_perturbed(PerturbationSpec(3.0, lambda z, x: 2 * x + z), [1.0],
                                   SimConfig(N=777, t=1.0, dt=1.0, seed=0))
        assert cloud.N == 777

    def test_ou_base_mean(self):
        N = 40_000
        spec = PerturbationSpec(0.0, lambda z, x: x, base=OUBase(theta=1.0))
        cloud = simulate_perturbed(spec, [2.0], SimConfig(N=N, t=1.0, dt=1.0, seed=4))
        var = -np.expm1(-2.0) / 2
        assert abs(np.mean(cloud.endpoints) - 2 * np.exp(-1.0)) < clt_band(var, N)

    def test_negative_rate_rejected(self):
        with pytest.raises(ValueError):
            PerturbationSpec(-1.0, lambda z, x: x)

    def test_independent_of_worker_count(self):
        spec = PerturbationSpec(2.0, lambda z, x: x + z)
        a = simulate_perturbed(spec, [0.0], SimConfig(N=3000, t=1.0, dt=1.0, seed=6, chunk=500, workers=1))
        b = simulate_perturbed(spec, [0.0], SimConfig(N=3000, t=1.0, dt=1.0, seed=6, chunk=500, workers=3))
        assert a.to_csv() == b.to_csv()


class TestSampleCloud:
    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            SampleCloud(np.array([0.0, np.nan]), np.zeros(1), 1.0)

    def test_csv_header_and_rows(self):
        text = SampleCloud(np.array([[0.5, 1.0], [2.0, -1.0]]), np.zeros(2), 1.0).to_csv()
        lines = text.splitlines()
        assert lines[0] == "path_index,x1,x2"
        assert lines[1] == "0,0.5,1"
        assert "\r" not in text


@pytest.mark.slow
class TestStatisticalLadders:
    def test_kde_error_decays_like_two_fifths(self):
        ns = [1000, 4000, 16000, 64000]
        errs = []
        exact = HeatKernel(t=1.0)
        for N in ns:
            e = []
            for seed in range(4):
                cloud = simulate_perturbed(PerturbationSpec(0.0, lambda z, x: x), [0.0],
                                           SimConfig(N=N, t=1.0, dt=1.0, seed=seed))
                e.append(l1_distance(kde_estimate(cloud), exact))
            errs.append(np.mean(e))
        slope = np.polyfit(np.log(ns), np.log(errs), 1)[0]
        assert slope == pytest.approx(-0.4, rel=0.2)

    def test_level_distance_tracks_rate_epsilon(self):
        # common random numbers couple the levels; the d0 lower bound decays like eps_n
        model = one_sided_stable1d(1.5)
        ladder = build_ladder(model, range(5))
        cfg = SimConfig(t=1.0, dt=0.1, N=1_000_000, seed=3, workers=4)
        clouds = [simulate_approx_paths(model, p, [0.0], cfg) for p in ladder]
        dictionary = TestFunctionDictionary.default(1)
        d = [dk_lower(clouds[i], clouds[i + 1], 0, dictionary).lower for i in range(len(ladder) - 1)]
        assert all(b < a for a, b in zip(d[:-1], d[1:]))
        levels = np.arange(len(d))
        slope = np.polyfit(levels, np.log2(d), 1)[0]
        eps_slope = np.polyfit(levels, np.log2([p.eps for p in ladder[:-1]]), 1)[0]
        assert slope == pytest.approx(eps_slope, rel=0.3)
