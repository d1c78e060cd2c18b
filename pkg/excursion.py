"""Brownian paths, local time at zero, and excursions away from zero.

The Ito measure is sampled in truncated form: lengths above ell_min with
density proportional to ell^-3/2, a fair sign and a normalized excursion shape.
Every sample carries the mass of the truncated measure so that Monte Carlo
averages can be turned back into integrals against the measure.
"""
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate

import ensemble
from kinetic_sde import Path, time_change_clock, time_change_scale
from potential import BOUNDARY_TOL, DomainError, PotentialSpec

logger = logging.getLogger(__name__)

DEFAULT_ELL_MIN = 1e-3
MIN_EXCURSION_STEPS = 256
MAX_EXCURSION_STEPS = 2 ** 16


class LocalTimeRangeError(ValueError):
    pass


@dataclass(eq=False)
class Excursion:
    grid: np.ndarray
    values: np.ndarray
    length: float
    sign: int
    seed: Optional[int] = None
    mass: Optional[float] = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if not self.length > 0:
            raise DomainError("excursion length must be positive")
        if self.sign not in (1, -1):
            raise DomainError("excursion sign must be +1 or -1")
        if self.values[0] != 0.0 or self.values[-1] != 0.0:
            raise DomainError("excursions start and end at 0")
        if np.any(self.sign * self.values[1:-1] <= 0):
            raise DomainError("excursion interior must keep one strict sign")

    def normalized(self) -> np.ndarray:
        """Values of ell^-1/2 |e(ell u)| on the grid u = t / ell."""
        return np.abs(self.values) / math.sqrt(self.length)

    def value_at_fraction(self, u: float) -> float:
        return float(np.interp(u * self.length, self.grid, self.values))


@dataclass(eq=False)
class LocalTimeCurve:
    grid: np.ndarray
    L0: np.ndarray
    h_loc: float

    def __post_init__(self):
        if self.L0[0] != 0.0 or np.any(np.diff(self.L0) < 0):
            raise DomainError("local time must start at 0 and be nondecreasing")


def brownian_path(t_max: float, dt: float, seed: int, path_id: int = 0) -> Path:
    n = max(1, int(math.ceil(t_max / dt - 1e-9)))
    rng = ensemble.path_generators(seed, path_id)[0]
    values = np.concatenate([[0.0], np.cumsum(rng.standard_normal(n)) * math.sqrt(dt)])
    return Path(np.arange(n + 1) * dt, values, seed, "brownian", "brownian", path_id)


# --- excursion shapes ------------------------------------------------------

def normalized_excursions(n: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """n normalized excursions on the uniform grid of [0, 1], shape (n, n_steps + 1).

    Each is the norm of a three-dimensional Brownian bridge from 0 to 0.
    """
    if n_steps < 2:
        raise DomainError("a normalized excursion needs n_steps >= 2")
    walk = np.cumsum(rng.standard_normal((n, n_steps, 3)), axis=1) / math.sqrt(n_steps)
    walk = np.concatenate([np.zeros((n, 1, 3)), walk], axis=1)
    u = np.linspace(0.0, 1.0, n_steps + 1)
    bridge = walk - u[None, :, None] * walk[:, -1:, :]
    out = np.linalg.norm(bridge, axis=2)
    out[:, 0] = 0.0
    out[:, -1] = 0.0
    return out


def sample_normalized_excursion(n_steps: int, seed: int) -> Excursion:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    values = normalized_excursions(1, n_steps, rng)[0]
    return Excursion(np.linspace(0.0, 1.0, n_steps + 1), values, 1.0, 1, seed)


def ito_mass(ell_min: float) -> float:
    """Mass of the Ito measure on excursions longer than ell_min."""
    if not ell_min > 0:
        raise DomainError("ell_min must be positive")
    return 2.0 / math.sqrt(2.0 * math.pi * ell_min)


def truncation_bias_bound(a: float, ell_min: float) -> float:
    """Bound on the truncation bias for test functions supported in [a, inf)."""
    return math.exp(-a * a / (2.0 * ell_min))


def _excursion_steps(length, dt):
    if dt is None:
        return MIN_EXCURSION_STEPS
    return int(min(MAX_EXCURSION_STEPS, max(MIN_EXCURSION_STEPS, math.ceil(length / dt))))


def _draw_lengths_signs(ell_min, n, rng):
    u = 1.0 - rng.random(n)
    return ell_min * u ** -2.0, np.where(rng.random(n) < 0.5, 1, -1)


def sample_ito_excursion(ell_min: float, seed: int, dt: Optional[float] = None) -> Excursion:
    mass = ito_mass(ell_min)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    lengths, signs = _draw_lengths_signs(ell_min, 1, rng)
    length, sign = float(lengths[0]), int(signs[0])
    n_steps = _excursion_steps(length, dt)
    shape = normalized_excursions(1, n_steps, rng)[0]
    return Excursion(np.linspace(0.0, length, n_steps + 1), sign * math.sqrt(length) * shape, length, sign,
                     seed, mass)


def _grouped_shapes(lengths, dt, rng):
    """Yield (indices, normalized shapes) grouped by grid size."""
    steps = np.array([_excursion_steps(ell, dt) for ell in lengths])
    for n_steps in np.unique(steps):
        idx = np.flatnonzero(steps == n_steps)
        for start in range(0, len(idx), max(1, 2 ** 21 // int(n_steps))):
            part = idx[start:start + max(1, 2 ** 21 // int(n_steps))]
            yield part, normalized_excursions(len(part), int(n_steps), rng)


def _occupation(phi, lengths, signs, dt, rng):
    """int_0^ell phi(e(r)) dr for each sampled excursion."""
    out = np.empty(len(lengths))
    for idx, shapes in _grouped_shapes(lengths, dt, rng):
        scale = (signs[idx] * np.sqrt(lengths[idx]))[:, None]
        out[idx] = lengths[idx] * integrate.trapezoid(phi(scale * shapes), dx=1.0 / (shapes.shape[1] - 1), axis=1)
    return out


def ito_functional_mean(phi: Callable, ell_min: float, n_samples: int, seed: int, dt: float = 0.02):
    """Truncated Monte Carlo of int (int_0^ell phi(e)) Xi(de); returns (estimate, stderr)."""
    rng = ensemble.chunk_generator(seed, ensemble.LIMIT_STREAM, 0)
    lengths, signs = _draw_lengths_signs(ell_min, n_samples, rng)
    occupation = _occupation(phi, lengths, signs, dt, rng)
    mass = ito_mass(ell_min)
    return mass * float(occupation.mean()), mass * float(occupation.std(ddof=1)) / math.sqrt(n_samples)


def ito_square_functional(phi: Callable, ell_min: float, n_samples: int, seed: int, dt: float = 0.02):
    """Truncated Monte Carlo of int (int_0^ell phi(e))^2 Xi(de); returns (estimate, stderr)."""
    rng = ensemble.chunk_generator(seed, ensemble.LIMIT_STREAM, 1)
    lengths, signs = _draw_lengths_signs(ell_min, n_samples, rng)
    squares = _occupation(phi, lengths, signs, dt, rng) ** 2
    mass = ito_mass(ell_min)
    return mass * float(squares.mean()), mass * float(squares.std(ddof=1)) / math.sqrt(n_samples)


def inverse_moment(shapes: np.ndarray, q: float) -> np.ndarray:
    """Midpoint rule for int_0^1 e(u)^-q du, skipping the first and last cells."""
    n_steps = shapes.shape[1] - 1
    mid = 0.5 * (shapes[:, 1:-2] + shapes[:, 2:-1])
    return np.sum(mid ** -q, axis=1) / n_steps


def excursion_inverse_moment_median(q: float, ell_min: float, n_samples: int, seed: int,
                                    n_steps: int = MIN_EXCURSION_STEPS) -> float:
    """Median over Ito samples of int_0^ell |e(u)|^-q du."""
    rng = ensemble.chunk_generator(seed, ensemble.LIMIT_STREAM, 2)
    lengths, _ = _draw_lengths_signs(ell_min, n_samples, rng)
    shapes = normalized_excursions(n_samples, n_steps, rng)
    return float(np.median(lengths ** (1.0 - q / 2.0) * inverse_moment(shapes, q)))


# --- local time ------------------------------------------------------------

def _band_occupation(W, dt, h_loc):
    """Time each linear segment of W spends in [-h_loc, h_loc]."""
    a, b = W[..., :-1], W[..., 1:]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    overlap = np.clip(np.minimum(hi, h_loc) - np.maximum(lo, -h_loc), 0.0, None)
    span = hi - lo
    flat = span <= 1e-300
    inside = (np.abs(a) <= h_loc).astype(float)
    return dt * np.where(flat, inside, overlap / np.where(flat, 1.0, span))


def local_time_zero(path: Path, h_loc: Optional[float] = None) -> LocalTimeCurve:
    """Occupation-band estimate of the local time at 0 of a Brownian path."""
    dt = float(path.grid[1] - path.grid[0])
    h_loc = dt ** 0.4 if h_loc is None else h_loc
    if not h_loc > 0:
        raise DomainError("bandwidth must be positive")
    occupied = _band_occupation(path.states, dt, h_loc)
    L0 = np.concatenate([[0.0], np.cumsum(occupied)]) / (2.0 * h_loc)
    return LocalTimeCurve(path.grid, L0, h_loc)


def inverse_local_time(curve: LocalTimeCurve, level: float) -> float:
    if level < 0 or level > curve.L0[-1]:
        raise LocalTimeRangeError(f"level {level} outside [0, {curve.L0[-1]:.6g}] reached by the path")
    return float(curve.grid[int(np.searchsorted(curve.L0, level, side="left"))])


def local_time_ensemble(t: float, dt: float, n_paths: int, seed: int, h_loc: Optional[float] = None,
                        chunk: int = 64) -> np.ndarray:
    """L0(t) for n_paths independent Brownian paths."""
    n = max(1, int(math.ceil(t / dt - 1e-9)))
    h_loc = dt ** 0.4 if h_loc is None else h_loc
    out = np.empty(n_paths)
    for start in range(0, n_paths, chunk):
        ids = range(start, min(start + chunk, n_paths))
        rows = np.stack([ensemble.path_generators(seed, i)[0].standard_normal(n) for i in ids]) * math.sqrt(dt)
        W = np.concatenate([np.zeros((len(rows), 1)), np.cumsum(rows, axis=1)], axis=1)
        out[start:start + len(rows)] = _band_occupation(W, dt, h_loc).sum(axis=1) / (2.0 * h_loc)
    return out


def timechange_localtime_test(spec: PotentialSpec, eps_list, t: float, seed: int, dt: float = 1e-6,
                              h_loc: Optional[float] = None, clock_rule: str = "segment", path_id: int = 0):
    """sup over [0, t] of |A^eps - L0| for one Brownian path, one row per eps."""
    if spec.beta < spec.d - BOUNDARY_TOL:
        raise DomainError("the local-time limit of A^eps holds for beta >= d")
    path = brownian_path(t, dt, seed, path_id)
    curve = local_time_zero(path, h_loc)
    rows = []
    for eps in sorted(eps_list, reverse=True):
        a = time_change_scale(spec, eps)
        A = time_change_clock(spec, eps, a, path.states, dt, clock_rule)
        rows.append({"eps": eps, "a_eps": a, "A0": float(A[0]),
                     "sup_distance": float(np.max(np.abs(A - curve.L0))), "h_loc": curve.h_loc})
    return rows


def timechange_localtime_trials(spec: PotentialSpec, eps_list, t: float, n_trials: int, seed: int,
                                dt: float = 1e-6) -> float:
    """Fraction of trials in which the sup distance decreases with eps."""
    spec.prepare()
    decreasing = 0
    for trial in range(n_trials):
        rows = timechange_localtime_test(spec, eps_list, t, seed, dt, path_id=trial)
        distances = [row["sup_distance"] for row in rows]
        decreasing += all(later < earlier for earlier, later in zip(distances, distances[1:]))
    return decreasing / n_trials


# --- dumps -----------------------------------------------------------------

def dump_excursion(excursion: Excursion, directory: str, name: str):
    os.makedirs(directory, exist_ok=True)
    data_path = os.path.join(directory, f"{name}.npy")
    meta_path = os.path.join(directory, f"{name}.json")
    np.save(data_path, np.vstack([excursion.grid, excursion.values]))
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump({"length": excursion.length, "sign": excursion.sign, "seed": excursion.seed,
                   "mass": excursion.mass}, fh, indent=2, sort_keys=True)
    return data_path, meta_path


def load_excursion(data_path: str) -> Excursion:
    columns = np.load(data_path)
    with open(os.path.splitext(data_path)[0] + ".json", "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    return Excursion(columns[0], columns[1], meta["length"], meta["sign"], meta["seed"], meta["mass"])
