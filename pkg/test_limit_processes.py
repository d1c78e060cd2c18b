import dataclasses
import math
import os
import sys
import unittest

import numpy as np
from scipy import stats

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import limit_processes
from limit_processes import (
    MAX_JUMP_RATE, ClockOverflowError, StableSpec, bessel_v_spec_for, burn_in, excursion_intervals,
    gaussian_limit_covariance, gaussian_limit_sigma, jump_amplitudes, psi_sphere_residual, sample_bessel,
    sample_bessel_paths, sample_stable_path, sample_stable_paths, sample_stationary_spherical, sample_V_paths,
    sample_V_process, sample_Y, sample_Y_batch, spherical_mixing_rate, stable_spec_for,
)
from potential import DomainError, PotentialSpec, RegimeTag, TableProfile, TiltedGamma, sample_nu_beta


class TestStationarySpherical(unittest.TestCase):
    def test_uniform_mixing_rate_and_burn_in(self):
        self.assertEqual(spherical_mixing_rate(PotentialSpec(d=3, beta=4.0)), 1.0)
        self.assertEqual(burn_in(PotentialSpec(d=3, beta=4.0)), 10.0)
        self.assertEqual(burn_in(PotentialSpec(d=2, beta=4.0)), 10.0)

    def test_eternal_path_lookup(self):
        spec = PotentialSpec(d=2, beta=4.0)
        path = sample_stationary_spherical(spec, clock_span=2.0, seed=1, dt_clock=0.25)
        self.assertAlmostEqual(path.times[0], -2.0)
        self.assertAlmostEqual(path.times[-1], 2.0)
        np.testing.assert_allclose(np.linalg.norm(path.at([-1.0, 0.0, 1.5]), axis=1), 1.0)
        with self.assertRaises(ClockOverflowError):
            path.at(3.0)


class TestJumpShapes(unittest.TestCase):
    def setUp(self):
        self.spec = PotentialSpec(d=2, beta=4.0)

    def test_batch_shape_and_symmetry(self):
        rng = np.random.default_rng(2)
        Y = sample_Y_batch(self.spec, 500, rng, n_steps=64)
        self.assertEqual(Y.shape, (500, 2))
        self.assertTrue(np.all(np.isfinite(Y)))
        spread = Y.std(axis=0) / math.sqrt(len(Y))
        self.assertTrue(np.all(np.abs(Y.mean(axis=0)) < 4.0 * spread))

    def test_single_shape_is_reproducible(self):
        np.testing.assert_array_equal(sample_Y(self.spec, 64, seed=3), sample_Y(self.spec, 64, seed=3))

    def test_grid_validation(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(DomainError):
            sample_Y_batch(self.spec, 2, rng, n_steps=63)
        with self.assertRaises(DomainError):
            sample_Y_batch(PotentialSpec(d=2, beta=8.0), 2, rng)

    def test_clock_overflow_without_clamp(self):
        rng = np.random.default_rng(0)
        with self.assertRaises(ClockOverflowError):
            sample_Y_batch(self.spec, 5, rng, n_steps=64, clock_span=0.01, clamp=False)
        Y = sample_Y_batch(self.spec, 5, rng, n_steps=64, clock_span=0.01, clamp=True)
        self.assertEqual(Y.shape, (5, 2))


class TestStableProcess(unittest.TestCase):
    def test_stable_parameters(self):
        spec = PotentialSpec(d=2, beta=4.0)
        stable = stable_spec_for(spec)
        alpha = 4.0 / 3.0
        kappa = spec.constants.kappa
        self.assertAlmostEqual(stable.alpha, alpha)
        self.assertAlmostEqual(stable.frak_a, alpha / (kappa * math.sqrt(2.0 * math.pi) * 4.0 ** (2.0 * alpha)))
        self.assertLessEqual(stable.jump_rate, MAX_JUMP_RATE * (1.0 + 1e-9))
        np.testing.assert_array_equal(stable.mean_Y, [0.0, 0.0])

    def test_critical_parameters(self):
        stable = stable_spec_for(PotentialSpec(d=2, beta=2.0))
        self.assertAlmostEqual(stable.alpha, 2.0 / 3.0)
        self.assertAlmostEqual(stable.frak_a, 2.0 ** (7.0 / 6.0) / (3.0 * math.sqrt(math.pi)))

    def test_non_stable_regimes_rejected(self):
        with self.assertRaises(DomainError):
            stable_spec_for(PotentialSpec(d=2, beta=8.0))
        with self.assertRaises(DomainError):
            stable_spec_for(PotentialSpec(d=2, beta=1.0))

    def test_compensator_integral(self):
        spec = PotentialSpec(d=2, beta=4.0)
        self.assertAlmostEqual(StableSpec(1.0, 1.0, math.exp(-2.0), spec).compensator_integral, 2.0)
        self.assertEqual(StableSpec(1.5, 1.0, 2.0, spec).compensator_integral, 0.0)
        with self.assertRaises(DomainError):
            StableSpec(2.0, 1.0, 0.1, spec)

    def test_paths_start_at_zero_and_are_reproducible(self):
        stable = stable_spec_for(PotentialSpec(d=2, beta=4.0), u_min=0.5, n_steps=64)
        grid = [0.0, 0.5, 1.0]
        paths = sample_stable_paths(stable, grid, 6, seed=4, chunk_size=4, n_workers=1)
        self.assertEqual(paths.shape, (6, 3, 2))
        np.testing.assert_array_equal(paths[:, 0], 0.0)
        again = sample_stable_paths(stable, grid, 6, seed=4, chunk_size=4, n_workers=1)
        np.testing.assert_array_equal(paths, again)
        self.assertEqual(sample_stable_path(stable, grid, seed=4).shape, (3, 2))
        with self.assertRaises(DomainError):
            sample_stable_paths(stable, [0.5, 1.0], 2, seed=0)

    def test_pool_is_used_for_many_jumps(self):
        stable = StableSpec(4.0 / 3.0, 1.0, 0.2, PotentialSpec(d=2, beta=4.0), n_steps=16, y_pool_size=10)
        shapes = limit_processes._jump_shapes(stable, 40, np.random.default_rng(0))
        self.assertEqual(shapes.shape, (40, 2))


class TestLimitLaws(unittest.TestCase):
    def test_stationary_marginal_is_nu_beta(self):
        spec = PotentialSpec(d=2, beta=4.0, gamma=TiltedGamma(0.4, [1.0, 0.0]))
        clocks = np.linspace(-50.0, 50.0, 11)
        states = np.vstack([sample_stationary_spherical(spec, 50.0, seed=seed, dt_clock=0.02).at(clocks)
                            for seed in range(40)])
        reference = sample_nu_beta(spec, 2000, np.random.default_rng(8))
        self.assertGreater(stats.ks_2samp(states[:, 0], reference[:, 0]).pvalue, 1e-3)

    def test_shape_grid_refinement(self):
        spec = PotentialSpec(d=2, beta=2.7)
        coarse = sample_Y_batch(spec, 1000, np.random.default_rng(9), n_steps=64)
        fine = sample_Y_batch(spec, 1000, np.random.default_rng(10), n_steps=128)
        self.assertFalse(np.any(np.all(fine == 0.0, axis=1)))
        spread = fine.std(axis=0) / math.sqrt(len(fine))
        self.assertTrue(np.all(np.abs(fine.mean(axis=0)) < 4.0 * spread))
        small, large = np.linalg.norm(coarse, axis=1).mean(), np.linalg.norm(fine, axis=1).mean()
        self.assertLess(abs(large - small) / large, 0.1)

    def test_stable_self_similarity(self):
        base = stable_spec_for(PotentialSpec(d=2, beta=2.5), n_steps=32)
        # about 100 jumps per unit time
        u_min = (base.frak_a / base.alpha / 100.0) ** (1.0 / base.alpha)
        stable = dataclasses.replace(base, u_min=u_min, y_pool_size=1000)
        paths = sample_stable_paths(stable, [0.0, 1.0, 2.0], 2000, seed=5, chunk_size=2000, n_workers=1)
        first, second = paths[:1000], paths[1000:]
        scaled = 2.0 ** (1.0 / stable.alpha) * np.linalg.norm(second[:, 1], axis=1)
        self.assertGreater(stats.ks_2samp(np.linalg.norm(first[:, 2], axis=1), scaled).pvalue, 1e-3)
        increments = first[:, 2, 0] - first[:, 1, 0]
        self.assertGreater(stats.ks_2samp(increments, second[:, 1, 0]).pvalue, 1e-3)
        self.assertGreater(stats.ks_2samp(first[:, 1, 0], second[:, 1, 1]).pvalue, 1e-3)
        self.assertGreater(stats.ks_2samp(first[:, 1, 0], -second[:, 1, 0]).pvalue, 1e-3)

    def test_jump_count_scaling(self):
        stable = stable_spec_for(PotentialSpec(d=2, beta=4.0), u_min=0.1, n_steps=32)
        u = jump_amplitudes(stable, 200000, np.random.default_rng(12))
        self.assertTrue(np.all(u >= stable.u_min))
        u0, c = 2.0 * stable.u_min, 3.0
        ratio = np.mean(u > c * u0) / np.mean(u > u0)
        self.assertAlmostEqual(ratio, c ** -stable.alpha, delta=0.01)

    def test_v_is_centered_and_isotropic(self):
        spec = PotentialSpec(d=2, beta=1.0)
        bv = bessel_v_spec_for(spec, 1.0, eta_exc=1e-3)
        V, _ = sample_V_paths(bv, spec, np.linspace(0.0, 1.0, 51), 200, seed=6)
        end = V[:, -1]
        spread = end.std(axis=0) / math.sqrt(len(end))
        self.assertTrue(np.all(np.abs(end.mean(axis=0)) < 4.0 * spread))
        self.assertGreater(stats.ks_2samp(end[:100, 0], end[100:, 1]).pvalue, 1e-3)


class TestBessel(unittest.TestCase):
    def test_paths_start_at_zero(self):
        radii = sample_bessel_paths(1.0, [0.0, 0.5, 1.0], 20, seed=1, n_workers=1)
        self.assertEqual(radii.shape, (20, 3))
        np.testing.assert_array_equal(radii[:, 0], 0.0)
        self.assertTrue(np.all(radii >= 0))

    def test_second_moment(self):
        # E R_t^2 = delta * t
        radii = sample_bessel_paths(1.0, [0.0, 1.0], 300, seed=2, n_workers=1)
        self.assertAlmostEqual(np.mean(radii[:, 1] ** 2), 1.0, delta=0.3)

    def test_euler_backend(self):
        radii = sample_bessel_paths(1.5, [0.0, 1.0], 300, seed=2, backend="euler", n_workers=1)
        self.assertAlmostEqual(np.mean(radii[:, 1] ** 2), 1.5, delta=0.4)

    def test_validation(self):
        with self.assertRaises(DomainError):
            sample_bessel(2.5, [0.0, 1.0], seed=0)
        with self.assertRaises(DomainError):
            sample_bessel(1.0, [0.0, 1.0], seed=0, backend="exact")
        with self.assertRaises(DomainError):
            sample_bessel(1.0, [0.1, 1.0], seed=0)


class TestBesselV(unittest.TestCase):
    def test_excursion_intervals(self):
        radii = np.array([0.0, 0.5, 2.0, 3.0, 0.5, 0.0, 4.0, 4.0])
        self.assertEqual(excursion_intervals(radii, 1.0), [(1, 4), (5, 7)])
        self.assertEqual(excursion_intervals(np.zeros(4), 1.0), [])

    def test_v_spec_only_in_bessel_regime(self):
        spec = PotentialSpec(d=3, beta=2.0)
        bv = bessel_v_spec_for(spec, 4.0)
        self.assertAlmostEqual(bv.delta, 1.0)
        self.assertAlmostEqual(bv.eta_exc, 2e-3)
        with self.assertRaises(DomainError):
            bessel_v_spec_for(PotentialSpec(d=3, beta=4.0), 1.0)

    def test_v_has_bessel_modulus(self):
        spec = PotentialSpec(d=2, beta=1.0)
        bv = bessel_v_spec_for(spec, 1.0, eta_exc=1e-3)
        grid = np.linspace(0.0, 1.0, 201)
        V, integral = sample_V_process(bv, spec, grid, seed=3)
        radii = sample_bessel_paths(1.0, grid, 1, seed=3, n_workers=1)[0]
        modulus = np.linalg.norm(V, axis=1)
        moving = modulus > 0
        np.testing.assert_allclose(modulus[moving], radii[moving], rtol=1e-9)
        self.assertEqual(integral.shape, (201, 2))
        np.testing.assert_array_equal(integral[0], 0.0)


class TestGaussianLimits(unittest.TestCase):
    def test_diffusive_variance(self):
        q, tag = gaussian_limit_sigma(PotentialSpec(d=2, beta=8.0))
        self.assertIs(tag, RegimeTag.DIFFUSIVE)
        self.assertAlmostEqual(q * q, 5.0 / 16.0, places=7)

    def test_critical_variance(self):
        cov = gaussian_limit_covariance(PotentialSpec(d=2, beta=6.0))
        np.testing.assert_allclose(cov, 2.0 / 15.0 * np.eye(2), rtol=1e-7)

    def test_unavailable_cases(self):
        with self.assertRaises(DomainError):
            gaussian_limit_sigma(PotentialSpec(d=2, beta=8.0, gamma=TiltedGamma(0.2, [1.0, 0.0])))
        table = TableProfile([0.0, 1.0, 2.0, 3.0], [1.0, 1.5, 2.2, 3.1])
        with self.assertRaises(DomainError):
            gaussian_limit_sigma(PotentialSpec(d=2, beta=8.0, Gamma=table))
        with self.assertRaises(DomainError):
            gaussian_limit_sigma(PotentialSpec(d=2, beta=4.0))

    def test_sphere_identity(self):
        for d in (2, 3, 5):
            self.assertLess(psi_sphere_residual(d), 1e-5, msg=f"d={d}")


if __name__ == "__main__":
    unittest.main()
