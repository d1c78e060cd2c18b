"""Limit processes of the long-time scaling of X.

- stable regimes: a compound-Poisson construction of the alpha-stable process
  whose jump shapes Y come from a normalized excursion carrying a stationary
  angular path
- Bessel regime: a Bessel process of dimension d - beta whose excursions carry
  independent stationary angular paths (the process V) and its time integral
- diffusive regimes with gamma == 1: explicit Gaussian covariances
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import integrate

import ensemble
import estimators
from excursion import normalized_excursions
from kinetic_sde import Path, walk_sphere
from potential import (
    BOUNDARY_TOL,
    DomainError,
    PotentialSpec,
    RegimeTag,
    SqrtOnePlusR2,
    classify_regime,
    radial_moment,
    sample_nu_beta,
    sphere_nodes,
    uniform_sphere,
)

logger = logging.getLogger(__name__)

DEFAULT_CLOCK_SPAN = 50.0
DEFAULT_DT_CLOCK = 0.01
DEFAULT_Y_STEPS = 256
MAX_JUMP_RATE = 500.0
Y_POOL_SIZE = 20000
Y_BATCH = 1000

_mixing_cache = {}


class ClockOverflowError(RuntimeError):
    pass


# --- stationary angular process --------------------------------------------

@dataclass(eq=False)
class EternalSphericalPath:
    times: np.ndarray
    states: np.ndarray
    seed: int

    def at(self, clock) -> np.ndarray:
        """Angular state at the given clock values (nearest grid point)."""
        clock = np.asarray(clock, dtype=float)
        if np.any(clock < self.times[0]) or np.any(clock > self.times[-1]):
            raise ClockOverflowError("clock value outside the simulated span; enlarge clock_span")
        idx = np.rint((clock - self.times[0]) / (self.times[1] - self.times[0])).astype(int)
        return self.states[np.clip(idx, 0, len(self.times) - 1)]


def spherical_mixing_rate(spec: PotentialSpec, seed: int = 7) -> float:
    """Exponential mixing rate of the angular process.

    Exact (d - 1) / 2 for gamma == 1; otherwise estimated once per model from
    a pilot path.
    """
    if spec.gamma.is_uniform:
        return 0.5 * (spec.d - 1)
    key = repr(sorted(spec.to_config().items()))
    if key not in _mixing_cache:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        clocks = np.arange(0.0, 400.0 + DEFAULT_DT_CLOCK / 2, DEFAULT_DT_CLOCK)
        states = walk_sphere(spec, sample_nu_beta(spec, 1, rng), clocks[:, None], rng)[:, 0]
        pilot = Path(clocks, states, seed, "projected-euler-sphere", "spherical")
        fit = estimators.mixing_rate(pilot, np.arange(0.1, 4.0, 0.1))
        _mixing_cache[key] = fit.rate if fit.reliable else 0.5 * (spec.d - 1)
        logger.debug("pilot mixing rate %.4g (R^2=%.3f)", fit.rate, fit.r_squared)
    return _mixing_cache[key]


def burn_in(spec: PotentialSpec) -> float:
    return max(10.0, 5.0 / spherical_mixing_rate(spec))


def sample_stationary_spherical(spec: PotentialSpec, clock_span: float, seed: int,
                                dt_clock: float = DEFAULT_DT_CLOCK) -> EternalSphericalPath:
    if not clock_span > 0:
        raise DomainError("clock_span must be positive")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    n_burn = int(math.ceil(burn_in(spec) / dt_clock))
    n_keep = int(math.ceil(2.0 * clock_span / dt_clock))
    clocks = np.arange(n_burn + n_keep + 1) * dt_clock
    states = walk_sphere(spec, sample_nu_beta(spec, 1, rng), clocks[:, None], rng, max_step=dt_clock)[:, 0]
    times = -clock_span + np.arange(n_keep + 1) * dt_clock
    return EternalSphericalPath(times, states[n_burn:], seed)


# --- the jump shape Y ------------------------------------------------------

def _walk_stationary(spec, clocks, rng, dt_clock):
    """Stationary angular states at per-sample clock values (n_points, n).

    Each walk starts from an exact nu_beta draw at its first clock; gaps longer
    than the burn-in horizon are redrawn from nu_beta.
    """
    theta0 = sample_nu_beta(spec, clocks.shape[1], rng)
    return walk_sphere(spec, theta0, clocks, rng, max_step=dt_clock, mix_horizon=burn_in(spec))


def _clamp(clocks, clock_span, clamp):
    over = np.abs(clocks) > clock_span
    if over.any():
        if not clamp:
            raise ClockOverflowError(
                f"{int(over.sum())} clock values exceed +/-{clock_span}; enlarge clock_span"
            )
        logger.debug("clamped %d clock values to +/-%g", int(over.sum()), clock_span)
    return np.clip(clocks, -clock_span, clock_span)


def sample_Y_batch(spec: PotentialSpec, n: int, rng: np.random.Generator, n_steps: int = DEFAULT_Y_STEPS,
                   clock_span: float = DEFAULT_CLOCK_SPAN, dt_clock: float = DEFAULT_DT_CLOCK,
                   clamp: bool = True) -> np.ndarray:
    """n independent jump shapes Y, shape (n, d)."""
    alpha = spec.exponent / 3.0
    if not 2.0 / 3.0 - BOUNDARY_TOL <= alpha < 2.0:
        raise DomainError(f"jump shapes need alpha in [2/3, 2), got {alpha}")
    if n_steps < 4 or n_steps % 2:
        raise DomainError("Y needs an even excursion grid with at least 4 steps")
    shapes = normalized_excursions(n, n_steps, rng)
    interior = shapes[:, 1:-1]
    du = 1.0 / n_steps
    # clock on interior grid points, anchored at u = 1/2
    running = integrate.cumulative_trapezoid(interior ** -2.0, dx=du, axis=1, initial=0.0)
    anchor = running[:, n_steps // 2 - 1][:, None]
    clock_points = (running - anchor) / spec.exponent ** 2
    clock_mid = _clamp(0.5 * (clock_points[:, :-1] + clock_points[:, 1:]), clock_span, clamp)
    e_mid = 0.5 * (interior[:, :-1] + interior[:, 1:])
    theta = _walk_stationary(spec, clock_mid.T, rng, dt_clock)
    weights = du * e_mid ** (1.0 / alpha - 2.0)
    return np.einsum("nc,cnd->nd", weights, theta)


def sample_Y(spec: PotentialSpec, n_steps: int, seed: int, **kwargs) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    return sample_Y_batch(spec, 1, rng, n_steps, **kwargs)[0]


# --- stable process --------------------------------------------------------

def _default_u_min(alpha, frak_a):
    # neglected small-jump second moment at most 1% of the squared jump scale
    target = (0.01 * (2.0 - alpha) * (frak_a / alpha) ** (2.0 / alpha) / frak_a) ** (1.0 / (2.0 - alpha))
    rate_cap = ((frak_a / alpha) / MAX_JUMP_RATE) ** (1.0 / alpha)
    return max(target, rate_cap)


@dataclass(frozen=True, eq=False)
class StableSpec:
    alpha: float
    frak_a: float
    u_min: float
    model: PotentialSpec
    n_steps: int = DEFAULT_Y_STEPS
    clock_span: float = DEFAULT_CLOCK_SPAN
    dt_clock: float = DEFAULT_DT_CLOCK
    mean_Y: np.ndarray = field(default=None)
    y_pool_size: int = Y_POOL_SIZE

    def __post_init__(self):
        if not 2.0 / 3.0 - BOUNDARY_TOL <= self.alpha < 2.0:
            raise DomainError(f"stable index must lie in [2/3, 2), got {self.alpha}")
        if not self.frak_a > 0 or not self.u_min > 0:
            raise DomainError("jump intensity and u_min must be positive")

    @property
    def jump_rate(self) -> float:
        """Expected number of jumps with amplitude factor >= u_min per unit time."""
        return self.frak_a / self.alpha * self.u_min ** -self.alpha

    @property
    def compensator_integral(self) -> float:
        """int_{u_min}^1 u^-alpha du."""
        if self.u_min >= 1.0:
            return 0.0
        if abs(self.alpha - 1.0) < 1e-12:
            return -math.log(self.u_min)
        return (1.0 - self.u_min ** (1.0 - self.alpha)) / (1.0 - self.alpha)

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "frak_a": self.frak_a, "u_min": self.u_min, "n_steps": self.n_steps,
                "clock_span": self.clock_span, "dt_clock": self.dt_clock, "jump_rate": self.jump_rate,
                "mean_Y": None if self.mean_Y is None else np.asarray(self.mean_Y).tolist()}


def stable_spec_for(spec: PotentialSpec, u_min: Optional[float] = None, n_steps: int = DEFAULT_Y_STEPS,
                    clock_span: float = DEFAULT_CLOCK_SPAN, seed: int = 11, n_pilot: int = 4000) -> StableSpec:
    d, beta = spec.d, spec.beta
    if abs(beta - d) <= BOUNDARY_TOL:
        alpha = 2.0 / 3.0
        frak_a = 2.0 ** (7.0 / 6.0) / (3.0 * math.sqrt(math.pi))
    elif d < beta < 4 + d - BOUNDARY_TOL:
        alpha = spec.exponent / 3.0
        kappa = spec.constants.kappa
        frak_a = alpha / (kappa * math.sqrt(2.0 * math.pi) * spec.exponent ** (2.0 * alpha))
    else:
        raise DomainError(f"beta={beta} is not a stable regime for d={d}")
    if spec.gamma.is_uniform or alpha < 1.0:
        mean_Y = np.zeros(d)
    else:
        rng = ensemble.chunk_generator(seed, ensemble.LIMIT_STREAM, 0)
        mean_Y = sample_Y_batch(spec, n_pilot, rng, n_steps, clock_span).mean(axis=0)
    return StableSpec(alpha, frak_a, u_min or _default_u_min(alpha, frak_a), spec, n_steps, clock_span,
                      mean_Y=mean_Y)


def _random_rotations(n, d, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, d, d)))
    return q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]


def _fresh_shapes(stable: StableSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    parts = [sample_Y_batch(stable.model, min(Y_BATCH, m - k), rng, stable.n_steps, stable.clock_span,
                            stable.dt_clock) for k in range(0, m, Y_BATCH)]
    return np.vstack(parts) if parts else np.zeros((0, stable.model.d))


def _jump_shapes(stable: StableSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    spec = stable.model
    if m <= stable.y_pool_size:
        return _fresh_shapes(stable, m, rng)
    # resampled pool; random rotations when gamma == 1
    pool = _fresh_shapes(stable, stable.y_pool_size, rng)
    logger.info("stable sampler: %d jumps drawn from a pool of %d shapes", m, len(pool))
    picked = pool[rng.integers(0, len(pool), m)]
    if spec.gamma.is_uniform:
        picked = np.einsum("nij,nj->ni", _random_rotations(m, spec.d, rng), picked)
    return picked


def jump_amplitudes(stable: StableSpec, m: int, rng: np.random.Generator) -> np.ndarray:
    """Amplitude factors with density proportional to u^(-1-alpha) on [u_min, inf)."""
    return stable.u_min * (1.0 - rng.random(m)) ** (-1.0 / stable.alpha)


def _stable_chunk(task):
    stable, t_grid, seed, chunk_id, n_paths = task
    rng = ensemble.chunk_generator(seed, ensemble.LIMIT_STREAM, chunk_id)
    t_grid = np.asarray(t_grid, dtype=float)
    t_max = t_grid[-1]
    counts = rng.poisson(stable.jump_rate * t_max, n_paths)
    total = int(counts.sum())
    times = rng.random(total) * t_max
    amplitudes = jump_amplitudes(stable, total, rng)
    jumps = amplitudes[:, None] * _jump_shapes(stable, total, rng)
    drift = np.zeros(stable.model.d)
    if stable.alpha >= 1.0 and stable.mean_Y is not None:
        drift = stable.frak_a * np.asarray(stable.mean_Y) * stable.compensator_integral
    out = np.empty((n_paths, len(t_grid), stable.model.d))
    offsets = np.concatenate([[0], np.cumsum(counts)])
    for i in range(n_paths):
        own_times = times[offsets[i]:offsets[i + 1]]
        order = np.argsort(own_times)
        running = np.vstack([np.zeros(stable.model.d), np.cumsum(jumps[offsets[i]:offsets[i + 1]][order], axis=0)])
        out[i] = running[np.searchsorted(own_times[order], t_grid, side="right")] - t_grid[:, None] * drift
    return out


def sample_stable_paths(stable: StableSpec, t_grid, n_paths: int, seed: int, chunk_size: int = 256,
                        n_workers=None) -> np.ndarray:
    """Stable paths on t_grid, shape (n_paths, n_t, d)."""
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0):
        raise DomainError("t_grid must increase from 0")
    tasks = [(stable, t_grid, seed, k, b - a) for k, (a, b) in enumerate(ensemble.chunk_ranges(n_paths, chunk_size))]
    return np.concatenate(ensemble.run_chunks(_stable_chunk, tasks, n_workers), axis=0)


def sample_stable_path(stable: StableSpec, t_grid, seed: int) -> np.ndarray:
    return sample_stable_paths(stable, t_grid, 1, seed)[0]


# --- Bessel process --------------------------------------------------------

def _positive_part_integral(X, dt, p):
    """int of (x_+)^-p along the linear interpolant of each row of X."""
    a, b = X[:, :-1], X[:, 1:]
    G = lambda x: np.maximum(x, 0.0) ** (1.0 - p) / (1.0 - p)
    dx = b - a
    steep = np.abs(dx) > 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        flat_value = np.where(0.5 * (a + b) > 0, np.maximum(0.5 * (a + b), 1e-300) ** -p, 0.0)
        ratio = (G(b) - G(a)) / np.where(steep, dx, 1.0)
    return dt * np.where(steep, ratio, flat_value)


def _bessel_timechange_rows(delta, t_grid, gens, dt_W, reflect):
    k = 2.0 - delta
    p = 2.0 * (1.0 - delta) / k
    t_max = float(t_grid[-1])
    horizon = max(4.0, 4.0 * max(1.0, k * k * t_max) ** k)
    n = int(math.ceil(horizon / dt_W))
    W = np.concatenate([np.zeros((len(gens), 1)),
                        np.cumsum(np.stack([g.standard_normal(n) for g in gens]), axis=1) * math.sqrt(dt_W)], axis=1)
    for _ in range(10):
        X = np.abs(W) if reflect else W
        A = np.concatenate([np.zeros((len(W), 1)), np.cumsum(_positive_part_integral(X, dt_W, p), axis=1)],
                           axis=1) / k ** 2
        if np.min(A[:, -1]) >= t_max:
            break
        steps = W.shape[1] - 1
        more = np.cumsum(np.stack([g.standard_normal(steps) for g in gens]), axis=1) * math.sqrt(dt_W) + W[:, -1:]
        W = np.concatenate([W, more], axis=1)
    else:
        raise RuntimeError("Bessel time change did not reach t_max after 10 horizon doublings")
    s_grid = np.arange(W.shape[1]) * dt_W
    out = np.empty((len(W), len(t_grid)))
    for i in range(len(W)):
        rho = np.interp(t_grid, A[i], s_grid)
        out[i] = np.maximum(np.interp(rho, s_grid, X[i]), 0.0) ** (1.0 / k)
    return out


def _bessel_euler_rows(delta, t_grid, gens, dt_W):
    t_max = float(t_grid[-1])
    n = int(math.ceil(t_max / dt_W - 1e-9))
    dt = t_max / n
    record = np.rint(np.asarray(t_grid) / dt).astype(int)
    Z = np.zeros(len(gens))
    noise = np.stack([g.standard_normal(n) for g in gens]) * math.sqrt(dt)
    out = np.empty((len(gens), len(t_grid)))
    slot = 0
    for step in range(n + 1):
        while slot < len(record) and record[slot] == step:
            out[:, slot] = np.sqrt(Z)
            slot += 1
        if step < n:
            Z = np.maximum(Z + delta * dt + 2.0 * np.sqrt(Z) * noise[:, step], 0.0)
    return out


def _bessel_chunk(task):
    delta, t_grid, seed, start, stop, dt_W, backend, reflect = task
    gens = [ensemble.path_generators(seed, i)[0] for i in range(start, stop)]
    if backend == "euler":
        return _bessel_euler_rows(delta, t_grid, gens, dt_W)
    return _bessel_timechange_rows(delta, t_grid, gens, dt_W, reflect)


def sample_bessel_paths(delta: float, t_grid, n_paths: int, seed: int, dt_W: float = 1e-3,
                        backend: str = "timechange", reflect: bool = True, chunk_size: int = 64,
                        n_workers=None) -> np.ndarray:
    """Bessel paths of dimension delta started at 0, shape (n_paths, n_t).

    The time-change backend runs on |W| by default: negative excursions of W
    contribute no time to the clock, so this is equal in law to using W.
    """
    if not 0.0 < delta < 2.0:
        raise DomainError(f"Bessel dimension must lie in (0, 2), got {delta}")
    if backend not in ("timechange", "euler"):
        raise DomainError(f"unknown Bessel backend {backend!r}")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid[0] != 0.0 or np.any(np.diff(t_grid) <= 0):
        raise DomainError("t_grid must increase from 0")
    tasks = [(delta, t_grid, seed, a, b, dt_W, backend, reflect) for a, b in ensemble.chunk_ranges(n_paths, chunk_size)]
    return np.concatenate(ensemble.run_chunks(_bessel_chunk, tasks, n_workers), axis=0)


def sample_bessel(delta: float, t_grid, seed: int, **kwargs) -> np.ndarray:
    return sample_bessel_paths(delta, t_grid, 1, seed, **kwargs)[0]


# --- the Bessel-modulated angular process ----------------------------------

@dataclass(frozen=True)
class BesselVSpec:
    delta: float
    eta_exc: float
    clock_span: float = DEFAULT_CLOCK_SPAN
    dt_clock: float = DEFAULT_DT_CLOCK

    def __post_init__(self):
        if not 0.0 < self.delta < 2.0:
            raise DomainError(f"Bessel dimension must lie in (0, 2), got {self.delta}")
        if not self.eta_exc > 0:
            raise DomainError("excursion threshold must be positive")


def bessel_v_spec_for(spec: PotentialSpec, t_max: float, eta_exc: Optional[float] = None) -> BesselVSpec:
    if classify_regime(spec).tag is not RegimeTag.BESSEL:
        raise DomainError("the process V exists only for d - 2 < beta < d")
    return BesselVSpec(spec.d - spec.beta, eta_exc or 1e-3 * math.sqrt(t_max))


def excursion_intervals(radii: np.ndarray, eta_exc: float):
    """Index ranges [i0, i1] of runs above eta_exc, widened by one flanking point."""
    above = np.concatenate([[False], radii > eta_exc, [False]])
    edges = np.flatnonzero(np.diff(above.astype(int)))
    starts, stops = edges[::2], edges[1::2] - 1
    last = len(radii) - 1
    return [(max(i0 - 1, 0), min(i1 + 1, last)) for i0, i1 in zip(starts, stops)]


def sample_V_process(bv: BesselVSpec, spec: PotentialSpec, t_grid, seed: int, dt_W: float = 1e-3,
                     path_id: int = 0):
    """The process V on t_grid and its time integral, two arrays (n_t, d)."""
    if not spec.d - 2 < spec.beta < spec.d:
        raise DomainError("the process V exists only for d - 2 < beta < d")
    t_grid = np.asarray(t_grid, dtype=float)
    radii = _bessel_chunk((bv.delta, t_grid, seed, path_id, path_id + 1, dt_W, "timechange", True))[0]
    V = np.zeros((len(t_grid), spec.d))
    intervals = excursion_intervals(radii, bv.eta_exc)
    if not intervals:
        logger.warning("degenerate V path: Bessel path never exceeds eta_exc=%g", bv.eta_exc)
        return V, np.zeros_like(V)
    rng = ensemble.path_generators(seed, path_id)[1]
    longest = max(i1 - i0 + 1 for i0, i1 in intervals)
    # one column per interval, padded with its last clock value
    clocks = np.empty((longest, len(intervals)))
    for col, (i0, i1) in enumerate(intervals):
        times = t_grid[i0:i1 + 1]
        inv_sq = np.maximum(radii[i0:i1 + 1], 1e-150) ** -2.0
        running = integrate.cumulative_trapezoid(inv_sq, times, initial=0.0)
        origin = np.interp(0.5 * (times[0] + times[-1]), times, running)
        own = _clamp(running - origin, bv.clock_span, True)
        clocks[:len(own), col] = own
        clocks[len(own):, col] = own[-1]
    theta = _walk_stationary(spec, clocks, rng, bv.dt_clock)
    for col, (i0, i1) in enumerate(intervals):
        V[i0:i1 + 1] = radii[i0:i1 + 1, None] * theta[:i1 - i0 + 1, col]
    return V, integrate.cumulative_trapezoid(V, t_grid, axis=0, initial=0.0)


def sample_V_paths(bv: BesselVSpec, spec: PotentialSpec, t_grid, n_paths: int, seed: int, dt_W: float = 1e-3):
    """n_paths independent copies of V: arrays (n_paths, n_t, d) for V and its integral."""
    pairs = [sample_V_process(bv, spec, t_grid, seed, dt_W, path_id=i) for i in range(n_paths)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


# --- Gaussian limits -------------------------------------------------------

def gaussian_limit_sigma(spec: PotentialSpec):
    """(q, tag) with limit covariance q^2 * Identity, for gamma == 1."""
    if not spec.gamma.is_uniform:
        raise DomainError("explicit Sigma unavailable for non-constant gamma; general case out of scope")
    if not isinstance(spec.Gamma, SqrtOnePlusR2):
        raise DomainError("explicit Sigma is available for Gamma(r) = sqrt(1 + r^2) only")
    regime = classify_regime(spec)
    d, beta = spec.d, spec.beta
    if regime.tag is RegimeTag.DIFFUSIVE:
        a = 2.0 / (3.0 * beta - 4.0 - 2.0 * d)
        const = spec.constants
        moment = const.sphere_area * (radial_moment(spec, d + 3.0, -beta)[0] + 3.0 * radial_moment(spec, d + 1.0, -beta)[0])
        return math.sqrt(2.0 * a * const.c_beta / d * moment), regime.tag
    if regime.tag is RegimeTag.CRITICAL_DIFFUSIVE:
        return (9.0 * spec.constants.kappa * d * (8.0 + d)) ** -0.5, regime.tag
    raise DomainError(f"no Gaussian limit in regime {regime.tag.value}")


def gaussian_limit_covariance(spec: PotentialSpec) -> np.ndarray:
    q, _ = gaussian_limit_sigma(spec)
    return q * q * np.eye(spec.d)


def psi_sphere_residual(d: int, n_points: int = 64, h: float = 1e-3) -> float:
    """max |1/2 Lap_S Psi - 9/2 Psi - theta| for Psi(theta) = -2 theta / (8 + d).

    The sphere Laplacian is the Euclidean one of the 0-homogeneous extension,
    taken by central differences.
    """
    a = 2.0 / (8.0 + d)
    theta = sphere_nodes(d, n_points)[0] if d <= 3 else uniform_sphere(n_points, d, np.random.default_rng(0))

    def psi(v):
        return -a * v / np.linalg.norm(v, axis=-1, keepdims=True)

    lap = np.zeros_like(theta)
    for i in range(d):
        shift = np.zeros(d)
        shift[i] = h
        lap += (psi(theta + shift) - 2.0 * psi(theta) + psi(theta - shift)) / h ** 2
    residual = 0.5 * lap - 4.5 * psi(theta) - theta
    return float(np.max(np.abs(residual)))
