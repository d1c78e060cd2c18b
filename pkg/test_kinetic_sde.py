import math
import os
import sys
import unittest
from unittest.mock import patch

import numpy as np
from scipy import integrate, stats

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import kinetic_sde
from kinetic_sde import (
    BudgetError, Path, TimeChangeRangeError, compose_velocity, compose_velocity_ensemble, rescaled_position,
    simulate_full, simulate_full_ensemble, simulate_radial, simulate_radial_ensemble, simulate_spherical,
    simulate_timechange, time_change_scale, timechange_marginal, walk_sphere,
)
from potential import NumericalError, PotentialSpec, TiltedGamma, classify_regime, free_spec, nu_prime_density


class TestPath(unittest.TestCase):
    def test_grid_must_start_at_zero(self):
        with self.assertRaises(ValueError):
            Path(np.array([0.1, 0.2]), np.zeros((2, 2)), 0, "x")

    def test_radial_path_must_stay_positive(self):
        with self.assertRaises(NumericalError):
            Path(np.array([0.0, 0.1]), np.array([1.0, -0.1]), 0, "x", kind="radial")

    def test_value_at_interpolates(self):
        path = Path(np.array([0.0, 1.0, 2.0]), np.array([[0.0], [2.0], [4.0]]), 0, "x")
        np.testing.assert_allclose(path.value_at(1.5), [3.0])
        with self.assertRaises(ValueError):
            path.value_at(3.0)


class TestEulerSchemes(unittest.TestCase):
    def setUp(self):
        self.spec = PotentialSpec(d=2, beta=4.0).prepare()

    def test_same_seed_same_path(self):
        v1, x1 = simulate_full(self.spec, 0.01, 2.0, seed=5, path_id=3)
        v2, x2 = simulate_full(self.spec, 0.01, 2.0, seed=5, path_id=3)
        np.testing.assert_array_equal(v1.states, v2.states)
        np.testing.assert_array_equal(x1.states, x2.states)
        self.assertEqual(len(v1.grid), 201)
        np.testing.assert_array_equal(x1.states[0], [0.0, 0.0])

    def test_different_path_ids_differ(self):
        v1, _ = simulate_full(self.spec, 0.01, 1.0, seed=5, path_id=0)
        v2, _ = simulate_full(self.spec, 0.01, 1.0, seed=5, path_id=1)
        self.assertFalse(np.allclose(v1.states[-1], v2.states[-1]))

    def test_ensemble_matches_single_paths(self):
        _, X = simulate_full_ensemble(self.spec, 0.01, 1.0, seed=9, n_paths=4, record_times=[0.5, 1.0],
                                      n_workers=1, chunk_size=1)
        self.assertEqual(X.shape, (2, 4, 2))
        _, single = simulate_full(self.spec, 0.01, 1.0, seed=9, path_id=2)
        np.testing.assert_allclose(X[1, 2], single.states[-1])
        np.testing.assert_allclose(X[0, 2], single.states[50])

    def test_ensemble_independent_of_worker_count(self):
        a = simulate_radial_ensemble(self.spec, 0.01, 1.0, 4, 6, [1.0], n_workers=1, chunk_size=2)
        b = simulate_radial_ensemble(self.spec, 0.01, 1.0, 4, 6, [1.0], n_workers=2, chunk_size=2)
        np.testing.assert_array_equal(a, b)

    def test_radial_paths_stay_positive(self):
        spec = PotentialSpec(d=2, beta=1.0, r0=0.05)
        path = simulate_radial(spec, 0.01, 5.0, seed=1)
        self.assertTrue(np.all(path.states > 0))

    def test_record_times_outside_horizon(self):
        with self.assertRaises(ValueError):
            simulate_full_ensemble(self.spec, 0.01, 1.0, 0, 2, [2.0], n_workers=1)

    def test_zero_paths(self):
        with self.assertRaises(ValueError):
            simulate_full_ensemble(self.spec, 0.01, 1.0, 0, 0, [1.0])

    def test_nonpositive_step(self):
        with self.assertRaises(ValueError):
            simulate_full(self.spec, 0.0, 1.0, seed=0)

    def test_non_finite_states_raise(self):
        with patch.object(kinetic_sde, "_advance", return_value=np.full((1, 2), np.nan)):
            with self.assertRaises(NumericalError):
                simulate_full(self.spec, 0.01, 0.1, seed=0)


class TestAngularPart(unittest.TestCase):
    def test_walk_stays_on_sphere(self):
        spec = PotentialSpec(d=3, beta=4.0, gamma=TiltedGamma(0.4, [0.0, 0.0, 1.0]))
        rng = np.random.default_rng(0)
        clocks = np.tile(np.linspace(0.0, 2.0, 21)[:, None], (1, 5))
        theta = walk_sphere(spec, np.tile(spec.theta0, (5, 1)), clocks, rng)
        self.assertEqual(theta.shape, (21, 5, 3))
        np.testing.assert_allclose(np.linalg.norm(theta, axis=-1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(theta[0], np.tile(spec.theta0, (5, 1)))

    def test_walk_rejects_decreasing_clock(self):
        spec = PotentialSpec(d=2, beta=4.0)
        with self.assertRaises(ValueError):
            walk_sphere(spec, spec.theta0[None, :], np.array([[0.0], [1.0], [0.5]]), np.random.default_rng(0))

    def test_composed_velocity_has_radial_modulus(self):
        spec = PotentialSpec(d=2, beta=4.0)
        velocity, clocks = compose_velocity(spec, 0.01, 1.0, seed=2)
        radial = simulate_radial(spec, 0.01, 1.0, seed=2)
        np.testing.assert_allclose(np.linalg.norm(velocity.states, axis=1), radial.states, rtol=1e-10)
        self.assertTrue(np.all(np.diff(clocks.H) >= 0))


class TestLaws(unittest.TestCase):
    def test_free_velocity_is_brownian(self):
        V, _ = simulate_full_ensemble(free_spec(2), 0.01, 1.0, seed=11, n_paths=4000, record_times=[1.0],
                                      n_workers=1, chunk_size=4000)
        np.testing.assert_allclose(V[0].var(axis=0), [1.0, 1.0], atol=0.1)
        np.testing.assert_allclose(V[0].mean(axis=0), [1.0, 0.0], atol=0.1)

    def test_free_radius_is_bessel_three(self):
        # E R_t^2 = r0^2 + d t
        R = simulate_radial_ensemble(free_spec(3), 0.01, 1.0, seed=12, n_paths=4000, record_times=[1.0],
                                     n_workers=1, chunk_size=4000)[0]
        self.assertAlmostEqual(np.mean(R ** 2), 4.0, delta=0.3)

    def test_radius_settles_to_nu_prime(self):
        spec = PotentialSpec(d=2, beta=8.0)
        R = simulate_radial_ensemble(spec, 0.005, 10.0, seed=13, n_paths=2000, record_times=[10.0],
                                     n_workers=1, chunk_size=2000)[0]
        edges = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, np.inf]
        probs = np.array([integrate.quad(lambda r: float(nu_prime_density(spec, r)), lo, hi)[0]
                          for lo, hi in zip(edges[:-1], edges[1:])])
        self.assertAlmostEqual(probs.sum(), 1.0, places=6)
        # P(R <= 1) = 1 - 2^-3
        self.assertAlmostEqual(probs[:4].sum(), 0.875, places=6)
        observed = np.bincount(np.searchsorted(edges[1:-1], R, side="right"), minlength=len(probs))
        self.assertGreater(stats.chisquare(observed, probs * len(R) / probs.sum()).pvalue, 1e-3)

    def test_circle_angle_variance_matches_clock(self):
        spec = PotentialSpec(d=2, beta=4.0)
        path = simulate_spherical(spec, np.arange(0.0, 500.01, 0.25), seed=14)
        a, b = path.states[:-1], path.states[1:]
        turns = np.arctan2(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0], np.sum(a * b, axis=1))
        self.assertAlmostEqual(np.var(turns), 0.25, delta=0.03)

    def test_long_clock_is_uniform(self):
        rng = np.random.default_rng(15)
        clocks = np.tile(np.array([[0.0], [10.0]]), (1, 1000))
        circle = walk_sphere(PotentialSpec(d=2, beta=4.0), np.tile([1.0, 0.0], (1000, 1)), clocks, rng)[-1]
        angle = np.arctan2(circle[:, 1], circle[:, 0])
        self.assertGreater(stats.kstest(angle / (2.0 * math.pi) + 0.5, "uniform").pvalue, 1e-3)
        sphere = walk_sphere(PotentialSpec(d=3, beta=4.0), np.tile([0.0, 0.0, 1.0], (1000, 1)), clocks, rng)[-1]
        # coordinates of a uniform point on S^2 are uniform on [-1, 1]
        self.assertGreater(stats.kstest((sphere[:, 2] + 1.0) / 2.0, "uniform").pvalue, 1e-3)

    def test_composition_matches_direct_scheme(self):
        spec = PotentialSpec(d=2, beta=4.0)
        composed = compose_velocity_ensemble(spec, 0.01, 1.0, seed=16, n_paths=1000, n_workers=1)
        direct = simulate_full_ensemble(spec, 0.01, 1.0, seed=17, n_paths=1000, record_times=[1.0],
                                        n_workers=1)[0][0]
        self.assertGreater(stats.ks_2samp(np.linalg.norm(composed, axis=1),
                                          np.linalg.norm(direct, axis=1)).pvalue, 1e-3)
        self.assertGreater(stats.ks_2samp(np.arctan2(composed[:, 1], composed[:, 0]),
                                          np.arctan2(direct[:, 1], direct[:, 0])).pvalue, 1e-3)

    def test_timechange_eps_scaling(self):
        # R^eps_t has the law of sqrt(eps) R_{t/eps}
        spec = PotentialSpec(d=2, beta=1.0)
        eps = 0.1
        changed = timechange_marginal(spec, eps, 1.0, 1e-3, seed=18, n_paths=1000, n_workers=1)
        direct = math.sqrt(eps) * simulate_radial_ensemble(spec, 0.005, 1.0 / eps, seed=19, n_paths=1000,
                                                           record_times=[1.0 / eps], n_workers=1)[0]
        self.assertGreater(stats.ks_2samp(changed, direct).pvalue, 1e-3)


class TestTimeChange(unittest.TestCase):
    def test_scale_per_regime(self):
        eps = 1e-2
        self.assertAlmostEqual(time_change_scale(PotentialSpec(d=2, beta=1.0), eps), eps ** 0.5)
        self.assertAlmostEqual(time_change_scale(PotentialSpec(d=2, beta=2.0), eps),
                               eps * abs(math.log(eps)) / 4.0)
        spec = PotentialSpec(d=2, beta=6.0)
        self.assertAlmostEqual(time_change_scale(spec, eps), eps / 24.0, places=10)
        with self.assertRaises(ValueError):
            time_change_scale(spec, 0.0)

    def test_path_and_clocks(self):
        spec = PotentialSpec(d=2, beta=1.0)
        path, clocks = simulate_timechange(spec, 1e-2, 1.0, 1e-3, seed=3, n_out=101)
        self.assertEqual(path.kind, "radial")
        self.assertTrue(np.all(path.states > 0))
        self.assertTrue(np.all(np.diff(clocks.A_eps) >= 0))
        np.testing.assert_allclose(np.interp(clocks.rho_eps, clocks.grid, clocks.A_eps), path.grid, atol=1e-6)

    def test_fixed_horizon_too_short(self):
        spec = PotentialSpec(d=2, beta=1.0)
        with self.assertRaises(TimeChangeRangeError):
            simulate_timechange(spec, 1e-2, 1.0, 1e-3, seed=3, w_horizon=1e-3)

    def test_marginal_shape(self):
        spec = PotentialSpec(d=2, beta=1.0)
        radii = timechange_marginal(spec, 1e-2, 0.5, 1e-3, seed=1, n_paths=10, n_workers=1)
        self.assertEqual(radii.shape, (10,))
        self.assertTrue(np.all(radii > 0))


class TestRescaledPosition(unittest.TestCase):
    def test_shape_and_scaling(self):
        spec = PotentialSpec(d=2, beta=4.0)
        out = rescaled_position(spec, [0.5, 0.25], [1.0], n_paths=3, seed=1, dt=0.05, n_workers=1)
        raw = rescaled_position(spec, [0.5, 0.25], [1.0], n_paths=3, seed=1, dt=0.05, raw=True, n_workers=1)
        self.assertEqual(out.shape, (2, 1, 3, 2))
        regime = classify_regime(spec)
        np.testing.assert_allclose(out[1, 0], regime.scaling(0.25) * raw[1, 0])

    def test_budget_and_validation(self):
        spec = PotentialSpec(d=2, beta=4.0)
        with self.assertRaises(BudgetError):
            rescaled_position(spec, [1e-3], [1.0], n_paths=100, seed=0, dt=0.01, max_path_steps=1e5)
        with self.assertRaises(ValueError):
            rescaled_position(spec, [0.1], [1.0], n_paths=0, seed=0)
        with self.assertRaises(ValueError):
            rescaled_position(spec, [0.1], [-1.0], n_paths=1, seed=0)


if __name__ == "__main__":
    unittest.main()
