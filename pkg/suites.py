"""Acceptance suites: properties, quick, full.

Every check returns RegimeReports; tolerances live in TOLERANCES and are
recorded with each run. Statistical tolerances are engineering calibrations,
not convergence rates.
"""
import logging
import math
import time

import numpy as np
from scipy import integrate, stats

import estimators
import excursion
import kinetic_sde
import limit_processes
from estimators import RegimeReport
from potential import (
    PotentialSpec,
    TiltedGamma,
    classify_regime,
    kappa_in_scale_space,
    m_prime_in_scale_space,
    mu_average,
    mu_average_lebesgue,
    scale_h,
    scale_h_inv,
    scale_h_inv_log,
    scale_h_log,
    scale_psi,
    scale_sigma,
)

logger = logging.getLogger(__name__)

SUITE_NAMES = ("properties", "quick", "full")

TOLERANCES = {
    "round_trip": 1e-10,
    "asymptotic_ratio": 0.05,
    "dual_quadrature": 1e-6,
    "fubini": 1e-6,
    "closed_form": 1e-8,
    "sphere_identity": 1e-3,
    "law_equivalence_p": 0.01,
    "diffusive_variance": {"quick": 0.15, "full": 0.10},
    "critical_diffusive_variance": {"quick": 0.25, "full": 0.20},
    "stable_index": {"quick": 0.15, "full": 0.10},
    "stable_qq_r2": 0.98,
    "centering_slope": 0.25,
    "centered_index": {"quick": 0.2, "full": 0.15},
    "bessel_ks_p": 0.01,
    "bessel_slope": 0.1,
    "scaling_slope": 0.1,
    "ito_identity": {"quick": 0.10, "full": 0.05},
    "local_time_z": 3.0,
    "localtime_decrease": 0.9,
    "ecf_calibration": 0.05,
    "hill_calibration": 0.1,
    "ks_false_positive": 0.02,
    "area_mean_z": 3.0,
    "ergodic_z": 3.0,
}

SCALES = {
    "quick": {"n_paths": 2000, "eps": 1e-2, "dt": 0.02, "ladder": [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3],
              "ladder_paths": 400, "centering_ladder": [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3],
              "law_paths": 2000, "dt_W": 1e-3, "ito_samples": 20000, "lt_paths": 2000, "lt_dt": 1e-5,
              "lt_trials": 20, "tc_dt": 1e-5, "v_paths": 300, "oracle_n": 10 ** 5, "ks_n": 2000,
              "ergodic_T": 2000.0, "ergodic_dt": 0.02},
    "full": {"n_paths": 10 ** 4, "eps": 1e-3, "dt": 0.01, "ladder": [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3],
             "ladder_paths": 2000, "centering_ladder": [1e-1, 10 ** -1.5, 1e-2, 10 ** -2.5, 1e-3],
             "law_paths": 10 ** 4, "dt_W": 1e-4, "ito_samples": 10 ** 5, "lt_paths": 10 ** 4, "lt_dt": 1e-5,
             "lt_trials": 100, "tc_dt": 1e-6, "v_paths": 2000, "oracle_n": 10 ** 5, "ks_n": 10 ** 4,
             "ergodic_T": 1e4, "ergodic_dt": 0.01},
}


def tolerance(name, scale_name):
    value = TOLERANCES[name]
    return value[scale_name] if isinstance(value, dict) else value


def _tilted(d, beta, eta=0.5):
    u0 = np.zeros(d)
    u0[0] = 1.0
    return PotentialSpec(d, beta, gamma=TiltedGamma(eta, u0))


# --- properties ------------------------------------------------------------

def check_scale_functions(ctx):
    reports = []
    w = np.concatenate([-np.logspace(-3, 6, 28)[::-1], [0.0], np.logspace(-3, 6, 28)])
    for d, beta in ((2, 3.0), (2, 6.0), (3, 4.0), (2, 2.0), (2, 1.5)):
        spec = PotentialSpec(d, beta).prepare()
        regime = classify_regime(spec).tag.value
        # log forms: h^-1(w) underflows for d = 2 and w << 0
        err = float(np.max(np.abs(scale_h_log(spec, scale_h_inv_log(spec, w)) - w) / (1.0 + np.abs(w))))
        reports.append(RegimeReport.compare(f"round_trip_d{d}_b{beta:g}", regime, 0.0, err,
                                            tolerance("round_trip", ctx["scale"])))
        k = spec.exponent
        big = 1e6
        ratios = {
            "h_inv": scale_h_inv(spec, big) / big ** (1.0 / k),
            "sigma": scale_sigma(spec, big) / (k * big ** ((beta + 1.0 - d) / k)),
            "psi": scale_psi(spec, big) / (k * k * big * big),
        }
        for name, ratio in ratios.items():
            reports.append(RegimeReport.compare(f"asymptotic_{name}_d{d}_b{beta:g}", regime, 1.0, float(ratio),
                                                tolerance("asymptotic_ratio", ctx["scale"])))
        if beta > d:
            reports.append(RegimeReport.compare(f"kappa_identity_d{d}_b{beta:g}", regime, spec.constants.kappa,
                                                kappa_in_scale_space(spec), TOLERANCES["dual_quadrature"],
                                                relative=True))
        if beta > d + 1:
            reports.append(RegimeReport.compare(f"m_prime_identity_d{d}_b{beta:g}", regime,
                                                spec.constants.m_beta_prime, m_prime_in_scale_space(spec),
                                                TOLERANCES["dual_quadrature"], relative=True))
    spec = PotentialSpec(2, 2.0)
    reports.append(RegimeReport.compare("h_closed_form_d2_b2", "CriticalStable23", 2.0 * math.log(2.0) + 3.0,
                                        scale_h(spec, 2.0), TOLERANCES["closed_form"]))
    return reports


def check_constants(ctx):
    reports = []
    for beta, target in ((3.0, 1.0 / 3.0), (6.0, 1.0 / 24.0)):
        spec = PotentialSpec(2, beta)
        reports.append(RegimeReport.compare(f"kappa_d2_b{beta:g}", classify_regime(spec).tag.value, target,
                                            spec.constants.kappa, TOLERANCES["closed_form"], relative=True))
    for beta, target in ((8.0, 5.0 / 16.0), (6.0, 2.0 / 15.0)):
        spec = PotentialSpec(2, beta)
        q, tag = limit_processes.gaussian_limit_sigma(spec)
        reports.append(RegimeReport.compare(f"q_squared_d2_b{beta:g}", tag.value, target, q * q,
                                            TOLERANCES["closed_form"], relative=True))
    return reports


def check_fubini(ctx):
    spec = _tilted(2, 5.0)
    tests = {
        "unit_ball": (lambda v: (np.linalg.norm(v, axis=-1) <= 1.0).astype(float), (1.0,)),
        "norm_capped": (lambda v: np.minimum(np.linalg.norm(v, axis=-1), 5.0), (5.0,)),
        "direction_0": (lambda v: v[..., 0] / np.linalg.norm(v, axis=-1), ()),
        "gaussian_bump": (lambda v: np.exp(-np.sum(v * v, axis=-1)), ()),
        "cos_sq_in_ball": (lambda v: (v[..., 0] ** 2 / np.sum(v * v, axis=-1))
                           * (np.linalg.norm(v, axis=-1) <= 2.0), (2.0,)),
    }
    reports = []
    for name, (phi, cuts) in tests.items():
        product = mu_average(spec, phi, cuts)
        lebesgue = mu_average_lebesgue(spec, phi)
        reports.append(RegimeReport.compare(f"fubini_{name}", "Stable", lebesgue, product, TOLERANCES["fubini"]))
    return reports


def check_sphere_identity(ctx):
    return [RegimeReport.compare(f"sphere_identity_d{d}", "CriticalDiffusive", 0.0,
                                 limit_processes.psi_sphere_residual(d), TOLERANCES["sphere_identity"])
            for d in (2, 3)]


def check_excursion_basics(ctx):
    mass = excursion.ito_mass(1.0)
    quad = integrate.quad(lambda ell: (2.0 * math.pi * ell ** 3) ** -0.5, 1.0, np.inf)[0]
    rng = np.random.default_rng(ctx["seed"])
    shapes = excursion.normalized_excursions(10 ** 4, 256, rng)
    areas = integrate.trapezoid(shapes, dx=1.0 / 256, axis=1)
    z = (areas.mean() - math.sqrt(math.pi / 8.0)) / (areas.std(ddof=1) / math.sqrt(len(areas)))
    return [
        RegimeReport.compare("ito_mass_above_1", "excursion", quad, mass, TOLERANCES["closed_form"], relative=True),
        RegimeReport.compare("excursion_area_mean_z", "excursion", 0.0, float(z), TOLERANCES["area_mean_z"]),
    ]


def check_estimator_smoke(ctx):
    rng = np.random.default_rng(ctx["seed"])
    ecf = estimators.stability_index_ecf(estimators.cms_stable(1.3, 10 ** 4, rng), n_boot=5)
    pareto = (1.0 - rng.random(10 ** 5)) ** (-1.0 / 1.5)
    hill = estimators.hill_tail_index(pareto, k=1000)
    return [
        RegimeReport.compare("ecf_cms_1.3", "oracle", 1.3, ecf.alpha_hat, TOLERANCES["ecf_calibration"],
                             stderr=ecf.stderr),
        RegimeReport.compare("hill_pareto_1.5", "oracle", 1.5, hill.alpha_hat, TOLERANCES["hill_calibration"],
                             stderr=hill.stderr),
    ]


def check_ergodic(ctx):
    s = ctx["params"]
    spec = PotentialSpec(2, 8.0)
    velocity, _ = kinetic_sde.simulate_full(spec, s["ergodic_dt"], s["ergodic_T"], ctx["seed"])
    return [RegimeReport.compare(f"ergodic_{row.name}", "Diffusive", 0.0, row.z, TOLERANCES["ergodic_z"],
                                 note=f"time average {row.time_average:.5g}, mu_beta {row.mu_average:.5g}")
            for row in estimators.ergodic_average(velocity, spec)]


def check_reproducibility(ctx):
    spec = PotentialSpec(2, 8.0)
    args = (spec, [0.1], [1.0], 48, ctx["seed"], 0.05)
    serial = kinetic_sde.rescaled_position(*args, n_workers=1, chunk_size=16)
    parallel = kinetic_sde.rescaled_position(*args, n_workers=2, chunk_size=16)
    repeat = kinetic_sde.rescaled_position(*args, n_workers=1, chunk_size=16)
    same = float(np.array_equal(serial, parallel) and np.array_equal(serial, repeat))
    return [RegimeReport.compare("worker_count_independence", "Diffusive", 1.0, same, 0.0)]


# --- acceptance at scale ---------------------------------------------------

def check_law_equivalence(ctx):
    s = ctx["params"]
    reports = []
    for d, beta in ((2, 3.0), (2, 6.0), (3, 4.0)):
        spec = PotentialSpec(d, beta).prepare()
        tc = kinetic_sde.timechange_marginal(spec, 1.0, 1.0, s["dt_W"], ctx["seed"], s["law_paths"],
                                             n_workers=ctx["workers"])
        euler = kinetic_sde.simulate_radial_ensemble(spec, 1e-3, 1.0, ctx["seed"] + 1, s["law_paths"], [1.0],
                                                     n_workers=ctx["workers"])[-1]
        p = estimators.two_sample_distance(tc, euler)["pvalue"]
        report = RegimeReport.compare(f"law_equivalence_d{d}_b{beta:g}", classify_regime(spec).tag.value,
                                      1.0, p, 1.0 - TOLERANCES["law_equivalence_p"])
        report.passed = p > TOLERANCES["law_equivalence_p"]
        reports.append(report)
    return reports


def _rescaled(spec, ctx, eps=None, n=None):
    s = ctx["params"]
    return kinetic_sde.rescaled_position(spec, [eps or s["eps"]], [1.0], n or s["n_paths"], ctx["seed"], s["dt"],
                                         n_workers=ctx["workers"])[0, 0]


def check_diffusive(ctx):
    spec = PotentialSpec(2, 8.0)
    q, tag = limit_processes.gaussian_limit_sigma(spec)
    result = estimators.gaussian_covariance_check(_rescaled(spec, ctx), q * q,
                                                  tolerance("diffusive_variance", ctx["scale"]))
    worst = max(result["relative_errors"])
    variance = RegimeReport.compare("diffusive_variance", tag.value, 0.0, worst,
                                    tolerance("diffusive_variance", ctx["scale"]))
    cross = result["cross"][0]
    covariance = RegimeReport.compare("diffusive_cross_covariance", tag.value, 0.0, cross["cov"], 3.0 * cross["se"])
    return [variance, covariance]


def check_critical_diffusive(ctx):
    spec = PotentialSpec(2, 6.0)
    q, tag = limit_processes.gaussian_limit_sigma(spec)
    tol = tolerance("critical_diffusive_variance", ctx["scale"])
    result = estimators.gaussian_covariance_check(_rescaled(spec, ctx), q * q, tol)
    return [RegimeReport.compare("critical_diffusive_variance", tag.value, 0.0, max(result["relative_errors"]), tol,
                                 note="log-corrected regime; slow convergence in eps")]


def check_stable(ctx):
    s = ctx["params"]
    reports = []
    for beta in (2.5, 4.0):
        spec = PotentialSpec(2, beta).prepare()
        regime = classify_regime(spec)
        X = _rescaled(spec, ctx)
        ecf = estimators.stability_index_ecf(X)
        reports.append(RegimeReport.compare(f"stable_index_b{beta:g}", regime.tag.value, regime.alpha,
                                            ecf.alpha_hat, tolerance("stable_index", ctx["scale"]), stderr=ecf.stderr))
        stable = limit_processes.stable_spec_for(spec)
        Z = limit_processes.sample_stable_paths(stable, [0.0, 1.0], s["n_paths"], ctx["seed"] + 7,
                                                chunk_size=1024, n_workers=ctx["workers"])[:, -1]
        r2, scale = estimators.qq_linearity(X[:, 0], Z[:, 0])
        report = RegimeReport.compare(f"stable_qq_b{beta:g}", regime.tag.value, 1.0, r2,
                                      1.0 - TOLERANCES["stable_qq_r2"], note=f"median scale match {scale:.4g}")
        reports.append(report)
    return reports


def check_critical_stable(ctx):
    spec = PotentialSpec(2, 2.0).prepare()
    ecf = estimators.stability_index_ecf(_rescaled(spec, ctx))
    return [RegimeReport.compare("critical_stable_index", "CriticalStable23", 2.0 / 3.0, ecf.alpha_hat,
                                 tolerance("stable_index", ctx["scale"]), stderr=ecf.stderr)]


def check_centering(ctx):
    s = ctx["params"]
    spec = _tilted(2, 3.0).prepare()
    regime = classify_regime(spec)
    const = spec.constants
    ladder = s["centering_ladder"]
    raw = kinetic_sde.rescaled_position(spec, ladder, [1.0], s["ladder_paths"], ctx["seed"], s["dt"], raw=True,
                                        n_workers=ctx["workers"])
    means = np.array([eps * raw[i, 0].mean(axis=0) for i, eps in enumerate(ladder)])
    slopes, _ = estimators.drift_slope(ladder, means)
    direction = const.M_beta / np.linalg.norm(const.M_beta)
    target = const.critical_centering_c * float(np.linalg.norm(const.M_beta))
    reports = [RegimeReport.compare("centering_drift_slope", regime.tag.value, target, float(slopes @ direction),
                                    TOLERANCES["centering_slope"], relative=True)]
    ecf = estimators.stability_index_ecf(_rescaled(spec, ctx))
    reports.append(RegimeReport.compare("centered_index", regime.tag.value, 1.0, ecf.alpha_hat,
                                        tolerance("centered_index", ctx["scale"]), stderr=ecf.stderr))
    return reports


def _bessel_marginal_distance(speeds, t, delta):
    return stats.kstest(speeds ** 2 / (2.0 * t), stats.gamma(delta / 2.0).cdf)


def check_bessel(ctx):
    s = ctx["params"]
    spec = PotentialSpec(2, 1.0).prepare()
    regime = classify_regime(spec)
    eps = s["eps"]
    V, _ = kinetic_sde.simulate_full_ensemble(spec, s["dt"], 1.0 / eps, ctx["seed"], s["n_paths"], [1.0 / eps],
                                              n_workers=ctx["workers"])
    speeds = math.sqrt(eps) * np.linalg.norm(V[0], axis=1)
    ks = _bessel_marginal_distance(speeds, 1.0, 1.0)
    marginal = RegimeReport.compare("bessel_speed_marginal", regime.tag.value, 1.0, float(ks.pvalue),
                                    1.0 - TOLERANCES["bessel_ks_p"])
    marginal.passed = bool(ks.pvalue > TOLERANCES["bessel_ks_p"])

    ladder = s["ladder"]
    raw = kinetic_sde.rescaled_position(spec, ladder, [1.0], s["ladder_paths"], ctx["seed"], s["dt"], raw=True,
                                        n_workers=ctx["workers"])
    fit = estimators.scaling_exponent({eps_i: raw[i, 0] for i, eps_i in enumerate(ladder)}, regime)
    slope = RegimeReport.compare("bessel_scaling_slope", regime.tag.value, 1.5, fit.slope,
                                 TOLERANCES["bessel_slope"], stderr=fit.stderr,
                                 note=f"{fit.method}; loglog coefficient {fit.loglog_coef:.3g}")

    t_grid = np.linspace(0.0, 1.0, 201)
    distances = []
    for eta in (0.1, 0.05):
        bv = limit_processes.BesselVSpec(1.0, eta)
        paths, _ = limit_processes.sample_V_paths(bv, spec, t_grid, s["v_paths"], ctx["seed"] + 3)
        distances.append(_bessel_marginal_distance(np.linalg.norm(paths[:, -1], axis=1), 1.0, 1.0).statistic)
    refine = RegimeReport.compare("v_sampler_refinement", regime.tag.value, 1.0,
                                  float(distances[1] <= distances[0]), 0.0,
                                  note=f"KS distance {distances[0]:.4f} -> {distances[1]:.4f}")
    return [marginal, slope, refine]


def check_excursions(ctx):
    s = ctx["params"]
    indicator = lambda x: ((x >= 1.0) & (x <= 2.0)).astype(float)
    mean, se = excursion.ito_functional_mean(indicator, 1e-3, s["ito_samples"], ctx["seed"])
    square, square_se = excursion.ito_square_functional(indicator, 1e-3, s["ito_samples"], ctx["seed"])
    bound = 4.0 * integrate.quad(math.sqrt, 1.0, 2.0)[0] ** 2
    spec = PotentialSpec(2, 3.0).prepare()
    L = excursion.local_time_ensemble(1.0, s["lt_dt"], s["lt_paths"], ctx["seed"])
    z = (L.mean() - math.sqrt(2.0 / math.pi)) / (L.std(ddof=1) / math.sqrt(len(L)))
    fraction = excursion.timechange_localtime_trials(spec, [1e-1, 1e-2, 1e-3], 1.0, s["lt_trials"], ctx["seed"],
                                                     dt=s["tc_dt"])
    inequality = RegimeReport.compare("ito_square_bound", "excursion", bound, square, 0.0, stderr=square_se)
    inequality.passed = bool(square <= bound + 3.0 * square_se)
    decreasing = RegimeReport.compare("localtime_sup_decreasing", "Stable", 1.0, fraction,
                                      1.0 - TOLERANCES["localtime_decrease"])
    return [
        RegimeReport.compare("ito_identity", "excursion", 1.0, mean, tolerance("ito_identity", ctx["scale"]),
                             relative=True, stderr=se),
        inequality,
        RegimeReport.compare("local_time_mean_z", "excursion", 0.0, float(z), TOLERANCES["local_time_z"]),
        decreasing,
    ]


def check_estimator_calibration(ctx):
    s = ctx["params"]
    rng = np.random.default_rng(ctx["seed"])
    reports = []
    for alpha in (0.8, 1.3, 1.6):
        ecf = estimators.stability_index_ecf(estimators.cms_stable(alpha, s["oracle_n"], rng), n_boot=5)
        reports.append(RegimeReport.compare(f"ecf_cms_{alpha:g}", "oracle", alpha, ecf.alpha_hat,
                                            TOLERANCES["ecf_calibration"], stderr=ecf.stderr))
    hill = estimators.hill_tail_index(estimators.cms_stable(0.8, s["oracle_n"], rng))
    reports.append(RegimeReport.compare("hill_cms_0.8", "oracle", 0.8, hill.alpha_hat,
                                        TOLERANCES["hill_calibration"], stderr=hill.stderr))
    rate = estimators.ks_calibration(200, s["ks_n"], ctx["seed"])
    reports.append(RegimeReport.compare("ks_false_positive_rate", "oracle", 0.05, rate,
                                        TOLERANCES["ks_false_positive"]))
    return reports


PROPERTY_CHECKS = [check_scale_functions, check_constants, check_fubini, check_sphere_identity,
                   check_excursion_basics, check_estimator_smoke, check_reproducibility]
SCALE_CHECKS = [check_law_equivalence, check_ergodic, check_diffusive, check_critical_diffusive, check_stable,
                check_critical_stable, check_centering, check_bessel, check_excursions, check_estimator_calibration]

SUITES = {
    "properties": PROPERTY_CHECKS,
    "quick": PROPERTY_CHECKS + SCALE_CHECKS,
    "full": PROPERTY_CHECKS + SCALE_CHECKS,
}


def run_check(check, ctx):
    """Run one check; hard errors become a failing report carrying the message."""
    name = check.__name__.replace("check_", "")
    started = time.perf_counter()
    try:
        reports = check(ctx)
    except (ValueError, RuntimeError) as exc:
        logger.exception("check %s failed", name)
        reports = [RegimeReport(name, "error", {}, {}, {}, False, note=f"{type(exc).__name__}: {exc}")]
    elapsed = time.perf_counter() - started
    for report in reports:
        report.runtime = elapsed
        report.config_hash = ctx["config_hash"]
    logger.info("check %s: %d/%d passed in %.1fs", name, sum(r.passed for r in reports), len(reports), elapsed)
    return reports


def run_suite(name, seed=0, n_workers=None, max_runtime_s=None, checks=None):
    """Run a suite; returns (reports, meta) with the tolerance table in force."""
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose one of {', '.join(SUITE_NAMES)}")
    scale = "full" if name == "full" else "quick"
    meta = {"suite": name, "seed": seed, "scale": scale, "params": SCALES[scale], "tolerances": TOLERANCES}
    ctx = {"scale": scale, "params": SCALES[scale], "seed": seed, "workers": n_workers,
           "config_hash": estimators.config_hash(meta)}
    started = time.perf_counter()
    reports = []
    for check in checks or SUITES[name]:
        reports.extend(run_check(check, ctx))
    elapsed = time.perf_counter() - started
    if max_runtime_s is not None:
        reports.append(RegimeReport.compare("runtime_budget", "harness", 0.0, elapsed, float(max_runtime_s)))
    meta.update(runtime=elapsed, config_hash=ctx["config_hash"])
    return reports, meta
