import math
import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from potential import (
    ConfigError, ConstantUndefinedError, DomainError, PotentialSpec, RegimeTag, TableProfile, TiltedGamma,
    UnsupportedRegimeError, classify_regime, eval_F, eval_U, free_spec, kappa_in_scale_space, load_model_config,
    m_prime_in_scale_space, mu_average, sample_nu_beta, scale_h, scale_h_inv, scale_h_inv_log, scale_h_log,
)


class TestPotentialSpec(unittest.TestCase):
    def test_rejects_beta_at_d_minus_2(self):
        with self.assertRaises(UnsupportedRegimeError):
            PotentialSpec(d=2, beta=0.0)
        with self.assertRaises(UnsupportedRegimeError):
            PotentialSpec(d=3, beta=0.5)

    def test_free_spec_skips_validation(self):
        spec = free_spec(2)
        self.assertEqual(spec.beta, 0.0)

    def test_rejects_bad_dimension_and_direction(self):
        with self.assertRaises(DomainError):
            PotentialSpec(d=1, beta=3.0)
        with self.assertRaises(DomainError):
            PotentialSpec(d=2, beta=3.0, theta0=[1.0, 1.0])

    def test_potential_and_force(self):
        spec = PotentialSpec(d=2, beta=6.0)
        v = np.array([[3.0, 4.0]])
        self.assertAlmostEqual(float(eval_U(spec, v)[0]), math.sqrt(26.0))
        # F = grad log U = v / (1 + |v|^2) for the radial profile
        np.testing.assert_allclose(eval_F(spec, v)[0], v[0] / 26.0, rtol=1e-10)

    def test_tilted_gamma_validation(self):
        with self.assertRaises(ConfigError):
            TiltedGamma(1.5, [1.0, 0.0])
        with self.assertRaises(ConfigError):
            TiltedGamma(0.3, [0.0, 0.0])

    def test_table_profile_validation(self):
        with self.assertRaises(ConfigError):
            TableProfile([0.0, 1.0, 2.0], [1.0, 2.0, 3.0])
        with self.assertRaises(ConfigError):
            TableProfile([0.0, 1.0, 2.0, 3.0], [1.0, 2.0, 1.5, 4.0])


class TestConstants(unittest.TestCase):
    def test_closed_forms_d2_beta6(self):
        c = PotentialSpec(d=2, beta=6.0).constants
        self.assertAlmostEqual(c.kappa, 1.0 / 24.0, places=9)
        self.assertAlmostEqual(c.b_beta, 4.0, places=8)
        self.assertAlmostEqual(c.a_beta, 1.0, places=12)
        self.assertAlmostEqual(c.c_beta, 2.0 / math.pi, places=8)
        self.assertAlmostEqual(c.m_beta_prime, math.pi / 4.0, places=8)
        np.testing.assert_allclose(c.m_beta, [0.0, 0.0])

    def test_kappa_d2_beta3(self):
        self.assertAlmostEqual(PotentialSpec(d=2, beta=3.0).constants.kappa, 1.0 / 3.0, places=9)

    def test_undefined_constants_raise(self):
        c = PotentialSpec(d=2, beta=1.5).constants
        with self.assertRaises(ConstantUndefinedError):
            c.kappa
        self.assertIsNone(c.as_dict()["kappa"])
        with self.assertRaises(ConstantUndefinedError):
            PotentialSpec(d=2, beta=2.5).constants.m_beta_prime
        with self.assertRaises(ConstantUndefinedError):
            PotentialSpec(d=2, beta=4.0).constants.critical_centering_c

    def test_critical_centering_constant(self):
        c = PotentialSpec(d=2, beta=3.0).constants
        self.assertAlmostEqual(c.critical_centering_c, 1.0 / 3.0, places=8)

    def test_tilted_mean_direction_points_away_from_tilt(self):
        spec = PotentialSpec(d=2, beta=4.0, gamma=TiltedGamma(0.3, [1.0, 0.0]))
        M = spec.constants.M_beta
        # gamma^-beta is largest opposite u0
        self.assertLess(M[0], 0.0)
        self.assertAlmostEqual(M[1], 0.0, places=8)

    def test_mu_average_of_one(self):
        spec = PotentialSpec(d=2, beta=5.0, gamma=TiltedGamma(0.2, [0.0, 1.0]))
        self.assertAlmostEqual(mu_average(spec, lambda v: np.ones(len(v))), 1.0, places=6)


class TestScaleFunction(unittest.TestCase):
    def test_closed_form_d2_beta2(self):
        spec = PotentialSpec(d=2, beta=2.0)
        self.assertAlmostEqual(scale_h(spec, 2.0), 2.0 * math.log(2.0) + 3.0, places=7)
        self.assertAlmostEqual(scale_h(spec, 1.0), 0.0, places=10)

    def test_inverse_round_trip(self):
        spec = PotentialSpec(d=3, beta=4.0)
        r = np.array([0.01, 0.5, 1.0, 7.0, 300.0])
        np.testing.assert_allclose(scale_h_inv(spec, scale_h(spec, r)), r, rtol=1e-7)

    def test_log_round_trip_where_radius_underflows(self):
        spec = PotentialSpec(d=2, beta=3.0)
        s = np.array([-400.0, -50.0, 0.0, 20.0])
        np.testing.assert_allclose(scale_h_inv_log(spec, scale_h_log(spec, s)), s, atol=1e-6)

    def test_h_rejects_nonpositive_radius(self):
        with self.assertRaises(DomainError):
            scale_h(PotentialSpec(d=2, beta=3.0), 0.0)

    def test_scale_space_identities(self):
        spec = PotentialSpec(d=2, beta=6.0)
        self.assertAlmostEqual(kappa_in_scale_space(spec), spec.constants.kappa, places=5)
        self.assertAlmostEqual(m_prime_in_scale_space(spec), spec.constants.m_beta_prime, places=4)
        with self.assertRaises(ConstantUndefinedError):
            m_prime_in_scale_space(PotentialSpec(d=2, beta=2.5))


class TestRegimes(unittest.TestCase):
    def test_classification_d2(self):
        cases = {
            8.0: RegimeTag.DIFFUSIVE,
            6.0: RegimeTag.CRITICAL_DIFFUSIVE,
            4.0: RegimeTag.STABLE,
            3.0: RegimeTag.CRITICAL_STABLE_1,
            2.5: RegimeTag.STABLE,
            2.0: RegimeTag.CRITICAL_STABLE_23,
            1.0: RegimeTag.BESSEL,
        }
        for beta, tag in cases.items():
            self.assertIs(classify_regime(PotentialSpec(d=2, beta=beta)).tag, tag, msg=f"beta={beta}")

    def test_stable_index_and_scaling(self):
        regime = classify_regime(PotentialSpec(d=2, beta=4.0))
        self.assertAlmostEqual(regime.alpha, 4.0 / 3.0)
        self.assertAlmostEqual(regime.scaling(1e-3), 1e-3 ** 0.75)
        self.assertAlmostEqual(regime.target_slope, 0.75)
        self.assertEqual(regime.centering_kind, "linear")

    def test_critical_regimes(self):
        crit = classify_regime(PotentialSpec(d=2, beta=2.0))
        self.assertAlmostEqual(crit.alpha, 2.0 / 3.0)
        eps = 1e-2
        self.assertAlmostEqual(crit.scaling(eps), (eps * abs(math.log(eps))) ** 1.5)
        self.assertAlmostEqual(crit.log_factor(eps), abs(math.log(eps)) ** 1.5)
        log_crit = classify_regime(PotentialSpec(d=2, beta=3.0))
        self.assertEqual(log_crit.centering_kind, "log")
        np.testing.assert_allclose(log_crit.centering(eps, 1.0), np.zeros(2), atol=1e-12)

    def test_bessel_regime(self):
        regime = classify_regime(PotentialSpec(d=3, beta=2.0))
        self.assertIs(regime.tag, RegimeTag.BESSEL)
        self.assertIsNone(regime.alpha)
        self.assertAlmostEqual(regime.scaling(1e-2), 1e-3)
        self.assertAlmostEqual(regime.target_slope, 1.5)


class TestConfig(unittest.TestCase):
    def test_load_from_dict(self):
        spec = load_model_config({"d": 3, "beta": 4.5, "gamma": {"eta": 0.4, "u0": [0, 0, 2]}})
        self.assertEqual(spec.d, 3)
        self.assertFalse(spec.gamma.is_uniform)
        np.testing.assert_allclose(spec.gamma.u0, [0.0, 0.0, 1.0])

    def test_round_trip_through_to_config(self):
        spec = load_model_config({"d": 2, "beta": 5.0, "gamma": {"eta": 0.2, "u0": [1, 0]}})
        again = load_model_config(spec.to_config())
        self.assertEqual(again.to_config(), spec.to_config())

    def test_load_toml_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "model.toml")
            with open(path, "w") as fh:
                fh.write('d = 2\nbeta = 3.0\nprofile = "sqrt1pr2"\n')
            spec = load_model_config(path)
        self.assertEqual(spec.beta, 3.0)

    def test_bad_configs(self):
        with self.assertRaises(ConfigError):
            load_model_config({"beta": 3.0})
        with self.assertRaises(ConfigError):
            load_model_config({"d": 2, "beta": 3.0, "profile": "cubic"})
        with self.assertRaises(ConfigError):
            load_model_config({"d": 2, "beta": 3.0, "profile": "custom-table"})
        with self.assertRaises(ConfigError):
            load_model_config("/nonexistent/model.json")


class TestNuBeta(unittest.TestCase):
    def test_samples_are_unit_vectors(self):
        rng = np.random.default_rng(3)
        spec = PotentialSpec(d=3, beta=4.0, gamma=TiltedGamma(0.5, [1.0, 0.0, 0.0]))
        theta = sample_nu_beta(spec, 5000, rng)
        self.assertEqual(theta.shape, (5000, 3))
        np.testing.assert_allclose(np.linalg.norm(theta, axis=1), 1.0)
        np.testing.assert_allclose(theta.mean(axis=0), spec.constants.M_beta, atol=0.05)


if __name__ == "__main__":
    unittest.main()
