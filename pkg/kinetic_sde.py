"""Simulation of the velocity / position process.

Schemes:
    simulate_full         Euler-Maruyama on dV = dB - (beta/2) F(V) dt, X = int V
    simulate_radial       the radial SDE of |V|
    simulate_spherical    the angular SDE, renormalized to the sphere each step
    compose_velocity      V = R * Theta(H) from independent radial / angular drivers
    simulate_timechange   R^eps as a time-changed Brownian motion through h^-1
    rescaled_position     scaled and centered X_{t/eps} per regime

Near the origin a step is split into 2^k Brownian-bridge substeps (k <= 6);
substeps that fall below r_floor are retried one level finer, and at the
finest level the radius is reflected at r_floor.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

import ensemble
from potential import (
    BOUNDARY_TOL,
    NumericalError,
    PotentialSpec,
    classify_regime,
    force_rows,
    sample_nu_beta,
    scale_h_inv,
    scale_psi,
    sigma_inv2,
    sigma_inv2_integral,
    tangent_projection,
)

logger = logging.getLogger(__name__)

R_FLOOR = 1e-8
NEAR_ZERO_FACTOR = 10.0
MAX_HALVINGS = 6
NOISE_BLOCK = 256
SPHERE_MAX_STEP = 0.01
SPHERE_MAX_SUBSTEPS = 4096
# angular increments longer than this are replaced by a fresh nu_beta draw
SPHERE_MIX_HORIZON = 60.0
DEFAULT_MAX_PATH_STEPS = 5e9
MAX_HORIZON_EXTENSIONS = 6


class BudgetError(RuntimeError):
    pass


class TimeChangeRangeError(RuntimeError):
    pass


@dataclass(eq=False)
class Path:
    grid: np.ndarray
    states: np.ndarray
    seed: int
    scheme_id: str
    kind: str = "velocity"
    path_id: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        if self.grid.ndim != 1 or len(self.grid) != len(self.states):
            raise ValueError("path grid and states must have the same length")
        if self.grid[0] != 0.0:
            raise ValueError("path grids start at 0")
        steps = np.diff(self.grid)
        if np.any(steps < 0) or (self.kind != "spherical" and np.any(steps == 0)):
            raise ValueError(f"{self.kind} path grid must be increasing")
        if self.kind == "radial" and np.any(self.states <= 0):
            raise NumericalError("radial path emitted a nonpositive sample")
        if self.kind == "spherical" and np.max(np.abs(np.linalg.norm(self.states, axis=-1) - 1.0)) > 1e-12:
            raise NumericalError("spherical path left the unit sphere")

    @property
    def t_max(self) -> float:
        return float(self.grid[-1])

    def value_at(self, t: float) -> np.ndarray:
        """State at time t by linear interpolation on the grid."""
        if not 0.0 <= t <= self.t_max:
            raise ValueError(f"t={t} outside [0, {self.t_max}]")
        k = min(int(np.searchsorted(self.grid, t, side="right")) - 1, len(self.grid) - 2)
        w = (t - self.grid[k]) / (self.grid[k + 1] - self.grid[k])
        return (1.0 - w) * self.states[k] + w * self.states[k + 1]


@dataclass(eq=False)
class ClockPair:
    grid: np.ndarray
    H: Optional[np.ndarray] = None
    A_eps: Optional[np.ndarray] = None
    rho_eps: Optional[np.ndarray] = None
    T_eps: Optional[np.ndarray] = None
    output_grid: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("H", "A_eps"):
            clock = getattr(self, name)
            if clock is None:
                continue
            if clock[0] != 0.0 or np.any(np.diff(clock) < 0):
                raise NumericalError(f"clock {name} must start at 0 and be nondecreasing")


# --- Euler schemes ---------------------------------------------------------

class _VelocityScheme:
    kind = "velocity"

    def __init__(self, spec: PotentialSpec):
        self.spec = spec
        self.half_beta = 0.5 * spec.beta

    def radius(self, state):
        return np.linalg.norm(state, axis=1)

    def drift(self, state):
        if self.half_beta == 0.0:
            return np.zeros_like(state)
        return -self.half_beta * force_rows(self.spec, state, self.radius(state))

    def reflect(self, state, r_floor, previous):
        r = self.radius(state)
        low = r < r_floor
        direction = np.where((r > 0)[:, None], state / np.where(r > 0, r, 1.0)[:, None],
                             previous / self.radius(previous)[:, None])
        out = state.copy()
        out[low] = direction[low] * (2.0 * r_floor - r[low])[:, None]
        return out


class _RadialScheme:
    kind = "radial"

    def __init__(self, spec: PotentialSpec):
        self.spec = spec
        self.half_beta = 0.5 * spec.beta
        self.half_dim = 0.5 * (spec.d - 1)

    def radius(self, state):
        return state[:, 0]

    def drift(self, state):
        r = state[:, 0]
        out = self.half_dim / r
        if self.half_beta:
            out = out - self.half_beta * self.spec.Gamma.derivative(r) / self.spec.Gamma.value(r)
        return out[:, None]

    def reflect(self, state, r_floor, previous):
        return np.where(state < r_floor, 2.0 * r_floor - state, state)


def _substeps(scheme, state, increments, h, r_floor, reflect):
    current = state.copy()
    hit = np.zeros(len(state), dtype=bool)
    for inc in increments:
        nxt = current + scheme.drift(current) * h + inc
        low = scheme.radius(nxt) < r_floor
        if low.any():
            hit |= low
            if reflect:
                nxt = scheme.reflect(nxt, r_floor, current)
            else:
                nxt[low] = current[low]
        current = nxt
    return current, hit


def _refine(scheme, state, dW, dt, rng, r_floor):
    r = np.maximum(scheme.radius(state), r_floor)
    level = np.clip(np.ceil(np.log2(NEAR_ZERO_FACTOR ** 2 * dt / r ** 2)), 1, MAX_HALVINGS).astype(int)
    out = np.empty_like(state)
    pending = np.ones(len(state), dtype=bool)
    while pending.any():
        for k in np.unique(level[pending]):
            rows = np.flatnonzero(pending & (level == k))
            m = 2 ** int(k)
            # Brownian bridge: m fine increments conditioned on their sum dW
            fine = rng.standard_normal((m, len(rows), state.shape[1])) * math.sqrt(dt / m)
            fine -= (fine.sum(axis=0) - dW[rows]) / m
            finest = k >= MAX_HALVINGS
            result, hit = _substeps(scheme, state[rows], fine, dt / m, r_floor, reflect=finest)
            accepted = ~hit | finest
            out[rows[accepted]] = result[accepted]
            pending[rows[accepted]] = False
            level[rows[~accepted]] += 1
    return out


def _advance(scheme, state, dW, dt, rng, r_floor):
    new = state + scheme.drift(state) * dt + dW
    flagged = (scheme.radius(state) < NEAR_ZERO_FACTOR * math.sqrt(dt)) | (scheme.radius(new) < r_floor)
    if flagged.any():
        new[flagged] = _refine(scheme, state[flagged], dW[flagged], dt, rng, r_floor)
    return new


def _n_steps(t_max: float, dt: float) -> int:
    if not dt > 0:
        raise ValueError(f"time step must be positive, got {dt}")
    if not t_max > 0:
        raise ValueError(f"horizon must be positive, got {t_max}")
    return max(1, int(math.ceil(t_max / dt - 1e-9)))


def _run_scheme(scheme, state0, dt, n_steps, master, path_ids, record_steps, chunk_key,
                track_position=False, r_floor=R_FLOOR):
    """Integrate a batch of paths, keeping states only at record_steps."""
    n, m = state0.shape
    mains = [ensemble.path_generators(master, i)[0] for i in path_ids]
    rng_refine = ensemble.chunk_generator(master, ensemble.REFINE_STREAM, chunk_key)
    record_steps = np.asarray(record_steps, dtype=int)
    kept_states = np.empty((len(record_steps), n, m))
    kept_pos = np.empty((len(record_steps), n, m)) if track_position else None
    state = state0.astype(float).copy()
    position = np.zeros_like(state)
    slot = 0

    def keep(step, slot):
        while slot < len(record_steps) and record_steps[slot] == step:
            kept_states[slot] = state
            if track_position:
                kept_pos[slot] = position
            slot += 1
        return slot

    slot = keep(0, slot)
    scale = math.sqrt(dt)
    for start in range(0, n_steps, NOISE_BLOCK):
        block = min(NOISE_BLOCK, n_steps - start)
        noise = np.stack([g.standard_normal((block, m)) for g in mains], axis=1) * scale
        for j in range(block):
            new = _advance(scheme, state, noise[j], dt, rng_refine, r_floor)
            if track_position:
                position += 0.5 * dt * (state + new)
            state = new
            slot = keep(start + j + 1, slot)
        finite = np.isfinite(state).all(axis=1)
        if not finite.all():
            bad = np.flatnonzero(~finite)[:5]
            raise NumericalError(
                f"{scheme.kind} scheme produced non-finite states between steps {start} and {start + block} "
                f"(dt={dt}) for paths {[path_ids[i] for i in bad]}: {state[bad].tolist()}"
            )
    return kept_states, kept_pos


def _record_steps(record_times, dt, n_steps):
    steps = np.rint(np.asarray(record_times, dtype=float) / dt).astype(int)
    if np.any(steps < 0) or np.any(steps > n_steps):
        raise ValueError("record times must lie within the simulated horizon")
    return steps


def simulate_full(spec: PotentialSpec, dt: float, t_max: float, seed: int, path_id: int = 0,
                  r_floor: float = R_FLOOR):
    """One velocity path and its position path, sampled on every step."""
    n_steps = _n_steps(t_max, dt)
    steps = np.arange(n_steps + 1)
    states, positions = _run_scheme(_VelocityScheme(spec), spec.v0[None, :], dt, n_steps, seed, [path_id],
                                    steps, path_id, track_position=True, r_floor=r_floor)
    grid = steps * dt
    velocity = Path(grid, states[:, 0], seed, "euler-maruyama", "velocity", path_id)
    position = Path(grid, positions[:, 0], seed, "euler-maruyama+trapezoid", "position", path_id)
    return velocity, position


def _velocity_chunk(task):
    spec, dt, n_steps, seed, start, stop, record_steps, track_position = task
    state0 = np.tile(spec.v0, (stop - start, 1))
    return _run_scheme(_VelocityScheme(spec), state0, dt, n_steps, seed, list(range(start, stop)),
                       record_steps, start, track_position=track_position)


def _radial_chunk(task):
    spec, dt, n_steps, seed, start, stop, record_steps = task
    state0 = np.full((stop - start, 1), spec.r0)
    states, _ = _run_scheme(_RadialScheme(spec), state0, dt, n_steps, seed, list(range(start, stop)),
                            record_steps, start)
    return states[:, :, 0]


def simulate_full_ensemble(spec: PotentialSpec, dt: float, t_max: float, seed: int, n_paths: int,
                           record_times, n_workers=None, chunk_size=None):
    """Velocities and positions of n_paths paths at record_times: two arrays (n_times, n_paths, d)."""
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    n_steps = _n_steps(t_max, dt)
    steps = _record_steps(record_times, dt, n_steps)
    chunk_size = chunk_size or ensemble.default_chunk_size()
    tasks = [(spec, dt, n_steps, seed, a, b, steps, True) for a, b in ensemble.chunk_ranges(n_paths, chunk_size)]
    parts = ensemble.run_chunks(_velocity_chunk, tasks, n_workers)
    return np.concatenate([p[0] for p in parts], axis=1), np.concatenate([p[1] for p in parts], axis=1)


def simulate_radial(spec: PotentialSpec, dt: float, t_max: float, seed: int, path_id: int = 0) -> Path:
    n_steps = _n_steps(t_max, dt)
    steps = np.arange(n_steps + 1)
    states, _ = _run_scheme(_RadialScheme(spec), np.array([[spec.r0]]), dt, n_steps, seed, [path_id],
                            steps, path_id)
    return Path(steps * dt, states[:, 0, 0], seed, "euler-maruyama-radial", "radial", path_id)


def simulate_radial_ensemble(spec: PotentialSpec, dt: float, t_max: float, seed: int, n_paths: int,
                             record_times, n_workers=None, chunk_size=None) -> np.ndarray:
    """Radii of n_paths paths at record_times, shape (n_times, n_paths)."""
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    n_steps = _n_steps(t_max, dt)
    steps = _record_steps(record_times, dt, n_steps)
    chunk_size = chunk_size or ensemble.default_chunk_size()
    tasks = [(spec, dt, n_steps, seed, a, b, steps) for a, b in ensemble.chunk_ranges(n_paths, chunk_size)]
    return np.concatenate(ensemble.run_chunks(_radial_chunk, tasks, n_workers), axis=1)


# --- angular part ----------------------------------------------------------

def spherical_step(spec: PotentialSpec, theta: np.ndarray, dB: np.ndarray, h) -> np.ndarray:
    """One projected Euler step of the angular SDE followed by renormalization."""
    drift = -0.5 * (spec.d - 1) * theta
    if not spec.gamma.is_uniform:
        pull = tangent_projection(theta, spec.gamma.grad(theta)) / spec.gamma.value(theta)[:, None]
        drift = drift - 0.5 * spec.beta * pull
    new = theta + tangent_projection(theta, dB) + drift * h
    return new / np.linalg.norm(new, axis=1, keepdims=True)


def walk_sphere(spec: PotentialSpec, theta0: np.ndarray, clocks: np.ndarray, rng: np.random.Generator,
                max_step: float = SPHERE_MAX_STEP, mix_horizon: float = SPHERE_MIX_HORIZON) -> np.ndarray:
    """Run angular paths along their own clock values.

    clocks has shape (n_points, n_paths) and is nondecreasing along axis 0;
    the result has shape (n_points, n_paths, d) with theta0 at clocks[0].
    """
    clocks = np.asarray(clocks, dtype=float)
    if np.any(np.diff(clocks, axis=0) < 0):
        raise ValueError("clock values must be nondecreasing")
    theta = np.array(theta0, dtype=float, copy=True)
    out = np.empty((len(clocks),) + theta.shape)
    out[0] = theta
    for j in range(1, len(clocks)):
        delta = clocks[j] - clocks[j - 1]
        fresh = delta > mix_horizon
        if fresh.any():
            theta[fresh] = sample_nu_beta(spec, int(fresh.sum()), rng)
        active = (delta > 0) & ~fresh
        if active.any():
            n_sub = min(int(math.ceil(delta[active].max() / max_step)), SPHERE_MAX_SUBSTEPS)
            h = (delta[active] / n_sub)[:, None]
            moving = theta[active]
            for _ in range(n_sub):
                moving = spherical_step(spec, moving, rng.standard_normal(moving.shape) * np.sqrt(h), h)
            theta[active] = moving
        out[j] = theta
    if not np.all(np.isfinite(out)):
        raise NumericalError("angular scheme produced non-finite states")
    return out


def simulate_spherical(spec: PotentialSpec, clock_grid, seed: int, theta0=None,
                       max_step: float = SPHERE_MAX_STEP) -> Path:
    clock_grid = np.asarray(clock_grid, dtype=float)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    start = spec.theta0 if theta0 is None else np.asarray(theta0, dtype=float)
    states = walk_sphere(spec, start[None, :], clock_grid[:, None], rng, max_step)[:, 0]
    return Path(clock_grid - clock_grid[0], states, seed, "projected-euler-sphere", "spherical")


def compose_velocity(spec: PotentialSpec, dt: float, t_max: float, seed: int, path_id: int = 0):
    """V = R * Theta(H_t) with H = int R^-2, from independent drivers."""
    radial = simulate_radial(spec, dt, t_max, seed, path_id)
    H = integrate.cumulative_trapezoid(radial.states ** -2.0, radial.grid, initial=0.0)
    rng = ensemble.path_generators(seed, path_id)[1]
    theta = walk_sphere(spec, spec.theta0[None, :], H[:, None], rng)[:, 0]
    velocity = Path(radial.grid, radial.states[:, None] * theta, seed, "radial-x-spherical", "velocity", path_id)
    return velocity, ClockPair(grid=radial.grid, H=H)


def compose_velocity_ensemble(spec: PotentialSpec, dt: float, t_max: float, seed: int, n_paths: int,
                              n_workers=None) -> np.ndarray:
    """V_{t_max} of n_paths composed paths, shape (n_paths, d)."""
    n_steps = _n_steps(t_max, dt)
    grid = np.arange(n_steps + 1) * dt
    radii = simulate_radial_ensemble(spec, dt, t_max, seed, n_paths, grid, n_workers)
    H = integrate.cumulative_trapezoid(radii ** -2.0, grid, axis=0, initial=0.0)
    rng = ensemble.chunk_generator(seed, ensemble.SPHERE_STREAM, 0)
    theta = walk_sphere(spec, np.tile(spec.theta0, (n_paths, 1)), H, rng)
    return radii[-1][:, None] * theta[-1]


# --- time change -----------------------------------------------------------

def time_change_scale(spec: PotentialSpec, eps: float) -> float:
    """a_eps of the time-change construction for the regime of spec."""
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    d, beta = spec.d, spec.beta
    if abs(beta - d) <= BOUNDARY_TOL:
        if eps == 1:
            raise ValueError("a_eps = eps |log eps| / 4 vanishes at eps = 1")
        return eps * abs(math.log(eps)) / 4.0
    if beta < d:
        return eps ** (spec.exponent / 2.0)
    return spec.constants.kappa * eps


def time_change_clock(spec, eps, a, W, dt_W, clock_rule):
    z = W / a
    g = sigma_inv2(spec, z)
    if clock_rule == "trapezoid":
        inc = 0.5 * dt_W * (g[..., 1:] + g[..., :-1])
    elif clock_rule == "segment":
        # exact integral along the linear interpolant of W
        K = sigma_inv2_integral(spec, z)
        dz = np.diff(z, axis=-1)
        steep = np.abs(dz) > 1e-9 * (1.0 + np.abs(z[..., :-1]))
        ratio = np.diff(K, axis=-1) / np.where(steep, dz, 1.0)
        inc = dt_W * np.where(steep, ratio, 0.5 * (g[..., 1:] + g[..., :-1]))
    else:
        raise ValueError(f"unknown clock rule {clock_rule!r}")
    A = np.concatenate([np.zeros(W.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    return (eps / a ** 2) * A


def _default_w_horizon(t_max: float) -> float:
    return max(4.0, 16.0 * t_max ** 2)


def _brownian_rows(gens, n_steps, dt):
    incs = np.stack([g.standard_normal(n_steps) for g in gens]) * math.sqrt(dt)
    return incs


def _timechange_rows(spec, eps, t_out, dt_W, seed, path_ids, w_horizon, clock_rule):
    a = time_change_scale(spec, eps)
    gens = [ensemble.path_generators(seed, i)[0] for i in path_ids]
    t_max = float(np.max(t_out))
    horizon = w_horizon or _default_w_horizon(t_max)
    n_steps = max(2, int(math.ceil(horizon / dt_W)))
    W = np.concatenate([np.zeros((len(gens), 1)), np.cumsum(_brownian_rows(gens, n_steps, dt_W), axis=1)], axis=1)
    A = time_change_clock(spec, eps, a, W, dt_W, clock_rule)
    extensions = 0
    while np.min(A[:, -1]) < t_max:
        simulated = dt_W * (W.shape[1] - 1)
        if w_horizon is not None or extensions >= MAX_HORIZON_EXTENSIONS:
            shortfall = float(np.min(A[:, -1]))
            needed = simulated * (t_max / max(shortfall, 1e-12)) ** 2
            raise TimeChangeRangeError(
                f"extend W: horizon {simulated:.4g} reaches A^eps={shortfall:.4g} < t_max={t_max:.4g}; "
                f"a horizon of about {needed:.4g} is required"
            )
        more = np.cumsum(_brownian_rows(gens, W.shape[1] - 1, dt_W), axis=1) + W[:, -1:]
        W = np.concatenate([W, more], axis=1)
        A = time_change_clock(spec, eps, a, W, dt_W, clock_rule)
        extensions += 1
        logger.debug("time change: extended W horizon to %.4g", dt_W * (W.shape[1] - 1))
    s_grid = np.arange(W.shape[1]) * dt_W
    rho = np.stack([np.interp(t_out, A[i], s_grid) for i in range(len(W))])
    W_rho = np.stack([np.interp(rho[i], s_grid, W[i]) for i in range(len(W))])
    radii = math.sqrt(eps) * np.maximum(scale_h_inv(spec, W_rho / a), np.finfo(float).tiny)
    return radii, W, A, rho, a


def simulate_timechange(spec: PotentialSpec, eps: float, t_max: float, dt_W: float, seed: int,
                        w_horizon: Optional[float] = None, clock_rule: str = "trapezoid",
                        n_out: int = 1001, path_id: int = 0):
    """R^eps on a uniform output grid of [0, t_max], with its clocks."""
    t_out = np.linspace(0.0, t_max, n_out)
    radii, W, A, rho, a = _timechange_rows(spec, eps, t_out, dt_W, seed, [path_id], w_horizon, clock_rule)
    s_grid = np.arange(W.shape[1]) * dt_W
    spherical_rate = 1.0 / (a ** 2 * np.asarray(scale_psi(spec, W[0] / a)))
    T_grid = integrate.cumulative_trapezoid(spherical_rate, s_grid, initial=0.0)
    clocks = ClockPair(grid=s_grid, A_eps=A[0], rho_eps=rho[0], T_eps=np.interp(rho[0], s_grid, T_grid),
                       output_grid=t_out)
    path = Path(t_out, radii[0], seed, f"timechange-{clock_rule}", "radial", path_id)
    return path, clocks


def _timechange_chunk(task):
    spec, eps, t, dt_W, seed, start, stop, w_horizon, clock_rule = task
    radii = _timechange_rows(spec, eps, np.array([t]), dt_W, seed, list(range(start, stop)), w_horizon,
                             clock_rule)[0]
    return radii[:, 0]


def timechange_marginal(spec: PotentialSpec, eps: float, t: float, dt_W: float, seed: int, n_paths: int,
                        w_horizon=None, clock_rule="trapezoid", n_workers=None, chunk_size=None) -> np.ndarray:
    """R^eps_t over n_paths independent Brownian drivers."""
    spec.prepare()
    chunk_size = chunk_size or ensemble.default_chunk_size()
    tasks = [(spec, eps, t, dt_W, seed, a, b, w_horizon, clock_rule)
             for a, b in ensemble.chunk_ranges(n_paths, chunk_size)]
    return np.concatenate(ensemble.run_chunks(_timechange_chunk, tasks, n_workers))


# --- rescaled positions ----------------------------------------------------

def rescaled_position(spec: PotentialSpec, eps_list, t_points, n_paths: int, seed: int, dt: float = 0.01,
                      max_path_steps: float = DEFAULT_MAX_PATH_STEPS, raw: bool = False,
                      n_workers=None, chunk_size=None) -> np.ndarray:
    """s(eps) * (X_{t/eps} - centering) with shape (n_eps, n_t, n_paths, d).

    Paths share seeds across eps. With raw=True the positions are returned
    unscaled and uncentered.
    """
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    regime = classify_regime(spec)
    eps_list = [float(e) for e in eps_list]
    t_points = np.asarray(t_points, dtype=float)
    if np.any(t_points <= 0):
        raise ValueError("t_points must be positive")
    for eps in eps_list:
        steps = n_paths * math.ceil(t_points.max() / eps / dt)
        if steps > max_path_steps:
            raise BudgetError(f"eps={eps}: {steps:.3g} path-steps exceed the budget of {max_path_steps:.3g}")
    out = np.empty((len(eps_list), len(t_points), n_paths, spec.d))
    for i, eps in enumerate(eps_list):
        horizon = t_points.max() / eps
        n_steps = _n_steps(horizon, dt)
        dt_eff = horizon / n_steps
        logger.info("rescaled_position: eps=%g, %d steps of %.4g for %d paths", eps, n_steps, dt_eff, n_paths)
        _, X = simulate_full_ensemble(spec, dt_eff, horizon, seed, n_paths, t_points / eps, n_workers, chunk_size)
        if raw:
            out[i] = X
            continue
        for j, t in enumerate(t_points):
            out[i, j] = regime.scaling(eps) * (X[j] - regime.centering(eps, t))
    return out
