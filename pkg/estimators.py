"""Statistics that turn ensembles into regime verdicts."""
import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy import integrate, stats

from potential import DomainError, PotentialSpec, mu_average, uniform_sphere

logger = logging.getLogger(__name__)

ECF_WINDOW = (math.exp(-2.0), math.exp(-0.05))
MIN_WINDOW_POINTS = 4
MIN_ECF_SAMPLES = 1000
MIN_KS_SAMPLES = 200
MIN_ERGODIC_HORIZON = 1e3
MIXING_R2_MIN = 0.8


class WindowError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


@dataclass
class IndexEstimate:
    alpha_hat: float
    stderr: float
    method: str
    n: int
    grid: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.alpha_hat < 2.5:
            raise DataError(f"{self.method} index estimate {self.alpha_hat:.4g} outside (0, 2.5)")
        self.stderr = max(float(self.stderr), 1e-12)


@dataclass
class ScalingFit:
    slope: float
    stderr: float
    method: str
    target: Optional[float]
    loglog_coef: float
    eps: list
    log_medians: list

    @property
    def deviation(self) -> Optional[float]:
        return None if self.target is None else self.slope - self.target


@dataclass
class MixingFit:
    rate: float
    r_squared: float
    reliable: bool
    lags: np.ndarray
    autocov: np.ndarray


@dataclass
class ErgodicRow:
    name: str
    time_average: float
    mu_average: float
    stderr: float
    z: float


@dataclass
class RegimeReport:
    check: str
    regime: str
    target: dict
    estimate: dict
    tolerance: dict
    passed: bool
    runtime: float = 0.0
    config_hash: str = ""
    ci: Optional[list] = None
    note: str = ""

    @classmethod
    def compare(cls, check, regime, target: float, estimate: float, tol: float, relative: bool = False,
                stderr: Optional[float] = None, **extra):
        """Report whose pass flag is |estimate - target| <= tol (times |target| when relative)."""
        bound = tol * abs(target) if relative else tol
        passed = bool(np.isfinite(estimate) and abs(estimate - target) <= bound)
        ci = None if stderr is None else [estimate - 2.0 * stderr, estimate + 2.0 * stderr]
        return cls(check, str(regime), {"value": float(target)}, {"value": float(estimate)},
                   {"value": float(tol), "relative": relative}, passed, ci=ci, **extra)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=_jsonable))


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return str(obj)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=_jsonable).encode("utf-8")).hexdigest()


# --- oracles ---------------------------------------------------------------

def cms_stable(alpha: float, size, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Symmetric alpha-stable draws with characteristic function exp(-|scale xi|^alpha).

    Chambers-Mallows-Stuck construction.
    """
    if not 0.1 <= alpha <= 2.0:
        raise DomainError("alpha must lie in [0.1, 2]")
    V = rng.uniform(-0.5 * math.pi, 0.5 * math.pi, size)
    W = rng.exponential(1.0, size)
    if abs(alpha - 1.0) < 1e-12:
        return scale * np.tan(V)
    X = (np.sin(alpha * V) / np.cos(V) ** (1.0 / alpha)
         * (np.cos(V - alpha * V) / W) ** ((1.0 - alpha) / alpha))
    return scale * X


def ks_calibration(n_trials: int = 200, n: int = 10 ** 4, seed: int = 0, level: float = 0.05) -> float:
    """False-positive rate of two_sample_distance on pairs of N(0,1) samples."""
    rng = np.random.default_rng(seed)
    hits = sum(two_sample_distance(rng.standard_normal(n), rng.standard_normal(n))["pvalue"] < level
               for _ in range(n_trials))
    return hits / n_trials


# --- stability index -------------------------------------------------------

def _as_rows(samples):
    X = np.asarray(samples, dtype=float)
    return X[:, None] if X.ndim == 1 else X


def _directions(d, n_directions):
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        angles = math.pi * np.arange(n_directions) / n_directions
        return np.column_stack([np.cos(angles), np.sin(angles)])
    return uniform_sphere(n_directions, d, np.random.default_rng(1234))


def _ecf_modulus(proj, xi):
    phase = np.outer(proj, xi)
    return np.hypot(np.cos(phase).mean(axis=0), np.sin(phase).mean(axis=0))


def _ecf_slope(proj, xi):
    mod = _ecf_modulus(proj, xi)
    window = (mod >= ECF_WINDOW[0]) & (mod <= ECF_WINDOW[1])
    if window.sum() < MIN_WINDOW_POINTS:
        raise WindowError(
            f"only {int(window.sum())} grid points with |phi| in [e^-2, e^-0.05]; adjust xi_grid"
        )
    slope = np.polyfit(np.log(xi[window]), np.log(-np.log(mod[window])), 1)[0]
    return slope, xi[window]


def stability_index_ecf(samples, xi_grid=None, n_directions: int = 8, n_boot: int = 20,
                        seed: int = 0) -> IndexEstimate:
    """Stable index from log(-log|phi_hat(xi u)|) against log xi, averaged over directions."""
    X = _as_rows(samples)
    n = len(X)
    if n < MIN_ECF_SAMPLES:
        raise DataError(f"ECF needs at least {MIN_ECF_SAMPLES} samples, got {n}")
    dirs = _directions(X.shape[1], n_directions)
    slopes, windows = [], []
    for u in dirs:
        proj = X @ u
        if xi_grid is None:
            spread = np.median(np.abs(proj - np.median(proj)))
            if not spread > 0:
                raise WindowError("projected samples are degenerate")
            xi = np.logspace(-3, 2, 150) / spread
        else:
            xi = np.asarray(xi_grid, dtype=float)
        slope, window = _ecf_slope(proj, xi)
        slopes.append(slope)
        windows.append(window)
    alpha_hat = float(np.mean(slopes))
    rng = np.random.default_rng(seed)
    boot = []
    for _ in range(n_boot):
        rows = X[rng.integers(0, n, n)]
        try:
            boot.append(np.mean([_ecf_slope(rows @ u, w)[0] for u, w in zip(dirs, windows)]))
        except WindowError:
            continue
    spread = np.std(slopes, ddof=1) / math.sqrt(len(slopes)) if len(slopes) > 1 else 0.0
    stderr = max(float(np.std(boot, ddof=1)) if len(boot) > 1 else 0.0, spread)
    grid = [float(windows[0][0]), float(windows[0][-1])]
    return IndexEstimate(alpha_hat, stderr, "ecf", n, grid, {"direction_slopes": [float(s) for s in slopes]})


def _hill(sorted_desc, k):
    return 1.0 / (np.mean(np.log(sorted_desc[:k])) - math.log(sorted_desc[k]))


def hill_tail_index(x, k: Optional[int] = None) -> IndexEstimate:
    """Hill estimator on the top-k order statistics of |x|.

    The drift flag is set when estimates over k/8, k/4, k/2, k move
    monotonically by more than 10%, the signature of a thin tail.
    """
    x = np.abs(np.asarray(x, dtype=float)).ravel()
    n = len(x)
    zeros = int(np.sum(x == 0.0))
    ties = n - len(np.unique(x[x > 0]))
    if zeros + ties > 0.01 * n:
        raise DataError(f"{zeros} zeros and {ties} ties exceed 1% of {n} samples")
    if k is None:
        k = min(int(n ** (2.0 / 3.0)), int(math.ceil(n / 10.0)) - 1)
    elif k >= n / 10.0:
        raise DataError(f"k={k} must be below n/10={n / 10.0:g}")
    if k < 10:
        raise DataError("Hill estimator needs k >= 10")
    top = np.sort(x)[::-1]
    alpha_hat = _hill(top, k)
    ladder = [kk for kk in (k // 8, k // 4, k // 2, k) if kk >= 10]
    path = [_hill(top, kk) for kk in ladder]
    steps = np.diff(path)
    drift = None
    if len(path) >= 3 and (np.all(steps > 0) or np.all(steps < 0)) and abs(path[-1] / path[0] - 1.0) > 0.1:
        drift = "up" if steps[0] > 0 else "down"
    return IndexEstimate(float(alpha_hat), alpha_hat / math.sqrt(k), "hill", n, ladder,
                         {"drift": drift, "ladder_estimates": [float(a) for a in path]})


# --- scaling exponent ------------------------------------------------------

def scaling_exponent(ensembles: Dict[float, np.ndarray], regime=None, log_factor: Optional[Callable] = None,
                     target: Optional[float] = None) -> ScalingFit:
    """Slope of log median |X_{t/eps}| against log(1/eps).

    A known log correction (regime.log_factor, or log_factor) is divided out
    before the regression; the coefficient of a log log(1/eps) term is
    reported alongside.
    """
    eps = np.array(sorted(ensembles), dtype=float)
    if len(eps) < 4 or math.log10(eps[-1] / eps[0]) < 2.0 - 1e-9:
        raise DataError("scaling regression needs at least 4 values of eps spanning 2 decades")
    if np.any(eps >= 1.0):
        raise DomainError("scaling regression needs eps < 1")
    factor = log_factor or (regime.log_factor if regime is not None else (lambda e: 1.0))
    medians = []
    for e in eps:
        X = _as_rows(ensembles[e])
        medians.append(np.median(np.linalg.norm(X, axis=1)) * factor(e))
    x = np.log(1.0 / eps)
    y = np.log(np.asarray(medians))
    if target is None and regime is not None:
        target = regime.target_slope
    # eps ascending means medians should fall
    if np.all(np.diff(y) < 0):
        fit = stats.linregress(x, y)
        slope, stderr, method = fit.slope, fit.stderr, "ols"
    else:
        msg = "medians are not monotone in eps; falling back to Theil-Sen"
        warnings.warn(msg)
        logger.warning(msg)
        slope, _, low, high = stats.theilslopes(y, x)
        stderr, method = 0.5 * (high - low) / 1.96, "theil-sen"
    design = np.column_stack([np.ones_like(x), x, np.log(x)])
    loglog = float(np.linalg.lstsq(design, y, rcond=None)[0][2])
    return ScalingFit(float(slope), float(stderr), method, target, loglog, eps.tolist(), y.tolist())


def drift_slope(eps_list, means):
    """Per-component slope (and stderr) of mean vectors against |log eps|."""
    x = np.abs(np.log(np.asarray(eps_list, dtype=float)))
    M = _as_rows(means)
    fits = [stats.linregress(x, M[:, j]) for j in range(M.shape[1])]
    return np.array([f.slope for f in fits]), np.array([f.stderr for f in fits])


# --- ergodic averages and mixing -------------------------------------------

def default_test_functions(d: int):
    funcs = {
        "indicator_unit_ball": (lambda v: (np.linalg.norm(v, axis=-1) <= 1.0).astype(float), (1.0,)),
        "norm_capped_5": (lambda v: np.minimum(np.linalg.norm(v, axis=-1), 5.0), (5.0,)),
    }
    for k in range(d):
        funcs[f"direction_{k}"] = ((lambda v, k=k: v[..., k] / np.linalg.norm(v, axis=-1)), ())
    return funcs


def ergodic_average(path, spec: PotentialSpec, test_functions=None, n_batches: int = 20):
    """Time averages against mu_beta averages with batch-means z-scores.

    test_functions maps a name to (phi, breakpoints); phi takes (n, d) arrays.
    """
    if spec.beta <= spec.d:
        raise DomainError("ergodic averages need beta > d")
    if path.t_max < MIN_ERGODIC_HORIZON:
        raise DomainError(f"ergodic averages need T >= {MIN_ERGODIC_HORIZON:g}, got {path.t_max:g}")
    funcs = test_functions or default_test_functions(spec.d)
    edges = np.linspace(0, len(path.grid) - 1, n_batches + 1).astype(int)
    rows = []
    for name, (phi, breakpoints) in funcs.items():
        values = phi(path.states)
        total = integrate.trapezoid(values, path.grid) / path.t_max
        batches = np.array([integrate.trapezoid(values[a:b + 1], path.grid[a:b + 1]) / (path.grid[b] - path.grid[a])
                            for a, b in zip(edges[:-1], edges[1:])])
        stderr = float(np.std(batches, ddof=1) / math.sqrt(n_batches))
        target = mu_average(spec, phi, breakpoints)
        z = (total - target) / stderr if stderr > 0 else math.inf
        rows.append(ErgodicRow(name, float(total), float(target), stderr, float(z)))
    return rows


def mixing_rate(path_or_states, lags, dt: Optional[float] = None, u0=None) -> MixingFit:
    """Exponential decay rate of the autocovariance of theta . u0."""
    if hasattr(path_or_states, "states"):
        states, dt = path_or_states.states, float(path_or_states.grid[1] - path_or_states.grid[0])
    else:
        states = np.asarray(path_or_states, dtype=float)
        if dt is None:
            raise DomainError("dt is required for raw state arrays")
    u0 = np.eye(states.shape[1])[0] if u0 is None else np.asarray(u0, dtype=float)
    f = states @ u0
    f = f - f.mean()
    steps = np.unique(np.rint(np.asarray(lags, dtype=float) / dt).astype(int))
    steps = steps[(steps > 0) & (steps < len(f) // 2)]
    autocov = np.array([np.mean(f * f)] + [np.mean(f[:-k] * f[k:]) for k in steps])
    lag_times = np.concatenate([[0.0], steps * dt])
    positive = autocov[1:] > 0
    if positive.sum() < 3:
        logger.warning("mixing fit unreliable: fewer than 3 positive autocovariances")
        return MixingFit(math.nan, 0.0, False, lag_times, autocov)
    fit = stats.linregress(lag_times[1:][positive], np.log(autocov[1:][positive]))
    rate, r2 = -fit.slope, fit.rvalue ** 2
    reliable = bool(r2 >= MIXING_R2_MIN and rate > 0)
    if not reliable:
        logger.warning("mixing fit unreliable: R^2=%.3f, rate=%.3g", r2, rate)
    return MixingFit(float(rate), float(r2), reliable, lag_times, autocov)


# --- distribution comparisons ----------------------------------------------

def _check_sizes(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if len(a) < MIN_KS_SAMPLES or len(b) < MIN_KS_SAMPLES:
        raise DataError(f"two-sample comparisons need at least {MIN_KS_SAMPLES} samples per side")
    return a, b


def two_sample_distance(a, b) -> dict:
    a, b = _check_sizes(a, b)
    result = stats.ks_2samp(a, b, method="asymp")
    return {"statistic": float(result.statistic), "pvalue": float(result.pvalue)}


def qq_table(a, b, n_quantiles: int = 99) -> np.ndarray:
    a, b = _check_sizes(a, b)
    probs = np.arange(1, n_quantiles + 1) / (n_quantiles + 1)
    return np.column_stack([probs, np.quantile(a, probs), np.quantile(b, probs)])


def qq_linearity(a, b, n_quantiles: int = 99):
    """R^2 of the QQ pairs after matching b to a at the median of |.|; returns (r2, scale)."""
    a, b = _check_sizes(a, b)
    scale = np.median(np.abs(a)) / np.median(np.abs(b))
    table = qq_table(a, b * scale, n_quantiles)
    return float(stats.linregress(table[:, 2], table[:, 1]).rvalue ** 2), float(scale)


def gaussian_covariance_check(samples, q2: float, rel_tol: float) -> dict:
    """Compare per-component variances with q^2 and cross covariances with 0 (3 standard errors)."""
    X = _as_rows(samples)
    n, d = X.shape
    cov = np.cov(X, rowvar=False).reshape(d, d)
    variances = np.diag(cov)
    rel_errors = np.abs(variances / q2 - 1.0)
    cross = []
    for i in range(d):
        for j in range(i + 1, d):
            se = math.sqrt(variances[i] * variances[j] / n)
            cross.append({"pair": [i, j], "cov": float(cov[i, j]), "se": se, "ok": abs(cov[i, j]) <= 3.0 * se})
    return {
        "variances": variances.tolist(),
        "relative_errors": rel_errors.tolist(),
        "variance_ok": bool(np.all(rel_errors <= rel_tol)),
        "cross": cross,
        "cross_ok": all(c["ok"] for c in cross),
    }
