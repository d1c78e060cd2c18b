import math
import os
import sys
import tempfile
import unittest

import numpy as np
from scipy import integrate

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from excursion import (
    Excursion, LocalTimeRangeError, brownian_path, dump_excursion, inverse_local_time, inverse_moment, ito_mass,
    ito_functional_mean, load_excursion, local_time_ensemble, local_time_zero, normalized_excursions,
    sample_ito_excursion, sample_normalized_excursion, timechange_localtime_test, truncation_bias_bound,
)
from kinetic_sde import time_change_scale
from potential import DomainError, PotentialSpec


class TestExcursionShapes(unittest.TestCase):
    def test_normalized_excursions_shape(self):
        shapes = normalized_excursions(50, 128, np.random.default_rng(0))
        self.assertEqual(shapes.shape, (50, 129))
        np.testing.assert_array_equal(shapes[:, 0], 0.0)
        np.testing.assert_array_equal(shapes[:, -1], 0.0)
        self.assertTrue(np.all(shapes[:, 1:-1] > 0))

    def test_mean_area(self):
        shapes = normalized_excursions(4000, 256, np.random.default_rng(1))
        area = integrate.trapezoid(shapes, dx=1.0 / 256, axis=1)
        self.assertAlmostEqual(area.mean(), math.sqrt(math.pi / 8.0), delta=0.02)

    def test_excursion_validation(self):
        grid = np.linspace(0.0, 1.0, 5)
        with self.assertRaises(DomainError):
            Excursion(grid, np.array([0.0, 1.0, -1.0, 1.0, 0.0]), 1.0, 1)
        with self.assertRaises(DomainError):
            Excursion(grid, np.array([0.1, 1.0, 1.0, 1.0, 0.0]), 1.0, 1)
        with self.assertRaises(DomainError):
            Excursion(grid, np.array([0.0, 1.0, 1.0, 1.0, 0.0]), 1.0, 0)

    def test_sample_normalized_excursion(self):
        exc = sample_normalized_excursion(64, seed=4)
        self.assertEqual(exc.length, 1.0)
        np.testing.assert_allclose(exc.normalized(), exc.values)
        self.assertEqual(exc.value_at_fraction(0.0), 0.0)

    def test_inverse_moment_of_constant_shape(self):
        shapes = np.ones((2, 11))
        np.testing.assert_allclose(inverse_moment(shapes, 0.5), 0.8)


class TestItoMeasure(unittest.TestCase):
    def test_mass_of_long_excursions(self):
        self.assertAlmostEqual(ito_mass(1.0), 2.0 / math.sqrt(2.0 * math.pi))
        self.assertAlmostEqual(ito_mass(0.25), 2.0 * ito_mass(1.0))
        with self.assertRaises(DomainError):
            ito_mass(0.0)

    def test_truncation_bound_decays(self):
        self.assertLess(truncation_bias_bound(1.0, 1e-3), 1e-100)
        self.assertGreater(truncation_bias_bound(0.1, 1e-2), truncation_bias_bound(0.2, 1e-2))

    def test_sampled_excursion(self):
        exc = sample_ito_excursion(1e-2, seed=3, dt=1e-3)
        self.assertGreaterEqual(exc.length, 1e-2)
        self.assertAlmostEqual(exc.grid[-1], exc.length)
        self.assertTrue(np.all(exc.sign * exc.values[1:-1] > 0))
        self.assertAlmostEqual(exc.mass, ito_mass(1e-2))

    def test_functional_of_zero(self):
        est, se = ito_functional_mean(lambda x: np.zeros_like(x), 1e-2, 200, seed=0)
        self.assertEqual(est, 0.0)
        self.assertEqual(se, 0.0)

    def test_functional_is_reproducible(self):
        phi = lambda x: (np.abs(x) >= 0.5).astype(float)
        first = ito_functional_mean(phi, 1e-2, 500, seed=8)
        second = ito_functional_mean(phi, 1e-2, 500, seed=8)
        self.assertEqual(first, second)
        self.assertGreater(first[0], 0.0)


class TestLocalTime(unittest.TestCase):
    def test_curve_is_nondecreasing(self):
        curve = local_time_zero(brownian_path(1.0, 1e-4, seed=2))
        self.assertEqual(curve.L0[0], 0.0)
        self.assertTrue(np.all(np.diff(curve.L0) >= 0))
        self.assertAlmostEqual(curve.h_loc, 1e-4 ** 0.4)

    def test_inverse_local_time(self):
        curve = local_time_zero(brownian_path(1.0, 1e-4, seed=2))
        half = 0.5 * curve.L0[-1]
        tau = inverse_local_time(curve, half)
        self.assertGreaterEqual(np.interp(tau, curve.grid, curve.L0), half - 1e-12)
        with self.assertRaises(LocalTimeRangeError):
            inverse_local_time(curve, curve.L0[-1] + 1.0)

    def test_mean_local_time_at_one(self):
        L = local_time_ensemble(1.0, 1e-4, 2000, seed=5)
        self.assertAlmostEqual(L.mean(), math.sqrt(2.0 / math.pi), delta=0.06)

    def test_timechange_rows(self):
        spec = PotentialSpec(d=2, beta=6.0)
        rows = timechange_localtime_test(spec, [1e-2, 1e-1], 0.2, seed=1, dt=1e-4)
        self.assertEqual([row["eps"] for row in rows], [1e-1, 1e-2])
        for row in rows:
            self.assertEqual(row["A0"], 0.0)
            self.assertTrue(np.isfinite(row["sup_distance"]))
        with self.assertRaises(DomainError):
            timechange_localtime_test(PotentialSpec(d=2, beta=1.0), [1e-2], 0.2, seed=1, dt=1e-4)

    def test_critical_timechange_rows(self):
        spec = PotentialSpec(d=2, beta=2.0)
        rows = timechange_localtime_test(spec, [1e-3, 1e-2], 0.2, seed=2, dt=1e-4)
        for row in rows:
            self.assertAlmostEqual(row["a_eps"], row["eps"] * abs(math.log(row["eps"])) / 4.0)
            self.assertEqual(row["A0"], 0.0)
            self.assertTrue(np.isfinite(row["sup_distance"]))
        with self.assertRaises(ValueError):
            time_change_scale(spec, 1.0)


class TestDumps(unittest.TestCase):
    def test_dump_and_load(self):
        exc = sample_ito_excursion(1e-2, seed=6)
        with tempfile.TemporaryDirectory() as tmp:
            data_path, meta_path = dump_excursion(exc, tmp, "exc")
            self.assertTrue(os.path.exists(meta_path))
            again = load_excursion(data_path)
        np.testing.assert_array_equal(again.values, exc.values)
        self.assertEqual(again.sign, exc.sign)
        self.assertEqual(again.length, exc.length)


if __name__ == "__main__":
    unittest.main()
