"""Model definition for the kinetic Fokker-Planck velocity process.

The potential is U(v) = Gamma(|v|) * gamma(v/|v|). This module owns everything
static about a model: profiles, the force, the invariant measure and its moment
constants, the scale function tables (h, h^-1, sigma, psi) and the regime of the
long-time limit.
"""
import json
import logging
import math
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, interpolate, special

logger = logging.getLogger(__name__)

BOUNDARY_TOL = 1e-12
QUAD_REL_TARGET = 1e-8
# Tables cover |h| up to this value; beyond it h^-1 refuses.
SCALE_W_MAX = 1e12
_S_MAX = 690.0


class DomainError(ValueError):
    pass


class ConstantUndefinedError(ValueError):
    pass


class UnsupportedRegimeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class RootFindError(RuntimeError):
    pass


class NumericalError(RuntimeError):
    pass


# --- radial profiles -------------------------------------------------------

class SqrtOnePlusR2:
    """Gamma(r) = sqrt(1 + r^2)."""

    name = "sqrt1pr2"

    def value(self, r):
        return np.hypot(1.0, r)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        return r / np.hypot(1.0, r)

    def log_value_at_log(self, s):
        # log Gamma(e^s) without overflow for large s
        return 0.5 * np.logaddexp(0.0, 2.0 * np.asarray(s, dtype=float))

    def elasticity_at_log(self, s):
        # r Gamma'(r) / Gamma(r) at r = e^s
        return special.expit(2.0 * np.asarray(s, dtype=float))

    def to_config(self):
        return self.name


class TableProfile:
    """Radial profile given as a monotone (r, Gamma(r)) table.

    Cubic interpolation inside the table; beyond the last node the profile
    continues with unit slope so Gamma(r)/r -> 1.
    """

    name = "custom-table"

    def __init__(self, radii, values):
        radii = np.asarray(radii, dtype=float)
        values = np.asarray(values, dtype=float)
        if radii.ndim != 1 or radii.shape != values.shape or radii.size < 4:
            raise ConfigError("profile table needs at least 4 (r, Gamma) pairs")
        if radii[0] != 0.0:
            raise ConfigError("profile table must start at r = 0")
        if np.any(np.diff(radii) <= 0):
            raise ConfigError("profile table radii must be strictly increasing")
        if np.any(values <= 0):
            raise ConfigError("profile table values must be positive")
        if np.any(np.diff(values) < 0):
            raise ConfigError("profile table values must be nondecreasing")
        self.radii = radii
        self.values = values
        self._spline = interpolate.CubicSpline(radii, values)
        self._r_end = radii[-1]
        self._offset = values[-1] - radii[-1]

    def value(self, r):
        r = np.asarray(r, dtype=float)
        inside = np.minimum(r, self._r_end)
        return np.where(r <= self._r_end, self._spline(inside), r + self._offset)

    def derivative(self, r):
        r = np.asarray(r, dtype=float)
        inside = np.minimum(r, self._r_end)
        return np.where(r <= self._r_end, self._spline(inside, 1), 1.0)

    def log_value_at_log(self, s):
        s = np.asarray(s, dtype=float)
        log_end = math.log(self._r_end)
        far = s > log_end
        tail = s + np.log1p(self._offset * np.exp(-np.maximum(s, log_end)))
        r = np.exp(np.minimum(s, log_end))
        return np.where(far, tail, np.log(self.value(r)))

    def elasticity_at_log(self, s):
        s = np.asarray(s, dtype=float)
        r = np.exp(np.minimum(s, _S_MAX))
        return r * self.derivative(r) / self.value(r)

    def to_config(self):
        return {"profile": self.name, "table": np.column_stack([self.radii, self.values]).tolist()}


# --- angular profiles ------------------------------------------------------

class UniformGamma:
    name = "uniform"

    def value(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.ones(theta.shape[:-1])

    def grad(self, theta):
        # ambient gradient of the 0-homogeneous extension
        return np.zeros_like(np.asarray(theta, dtype=float))

    @property
    def min_value(self):
        return 1.0

    @property
    def is_uniform(self):
        return True

    def to_config(self):
        return self.name


class TiltedGamma:
    """gamma(theta) = 1 + eta * (theta . u0), eta in (0, 1)."""

    name = "tilted"

    def __init__(self, eta, u0):
        u0 = np.asarray(u0, dtype=float)
        if not 0.0 < eta < 1.0:
            raise ConfigError(f"gamma tilt eta must lie in (0, 1), got {eta}")
        norm = np.linalg.norm(u0)
        if norm == 0.0:
            raise ConfigError("gamma tilt direction u0 must be nonzero")
        self.eta = float(eta)
        self.u0 = u0 / norm

    def value(self, theta):
        return 1.0 + self.eta * (np.asarray(theta, dtype=float) @ self.u0)

    def grad(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.broadcast_to(self.eta * self.u0, theta.shape).copy()

    @property
    def min_value(self):
        return 1.0 - self.eta

    @property
    def is_uniform(self):
        return False

    def to_config(self):
        return {"eta": self.eta, "u0": self.u0.tolist()}


def tangent_projection(theta, vec):
    """Project vec onto the tangent space of the sphere at theta (row-wise)."""
    return vec - np.sum(vec * theta, axis=-1, keepdims=True) * theta


# --- sphere quadrature and sampling ----------------------------------------

def sphere_area(d: int) -> float:
    return 2.0 * math.pi ** (d / 2.0) / math.gamma(d / 2.0)


def sphere_nodes(d: int, n: Optional[int] = None):
    """Quasi-uniform nodes on S^{d-1} with weights of a probability measure.

    d=2 uses an equispaced angular grid (spectrally accurate for smooth
    integrands), d=3 a Fibonacci lattice, d>=4 a fixed pseudo-random cloud.
    """
    if d == 2:
        n = n or 4096
        angles = 2.0 * math.pi * (np.arange(n) + 0.5) / n
        nodes = np.column_stack([np.cos(angles), np.sin(angles)])
    elif d == 3:
        n = n or 20000
        k = np.arange(n) + 0.5
        z = 1.0 - 2.0 * k / n
        phi = math.pi * (1.0 + math.sqrt(5.0)) * k
        rho = np.sqrt(1.0 - z * z)
        nodes = np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    else:
        n = n or 200000
        cloud = np.random.default_rng(20240611).standard_normal((n, d))
        nodes = cloud / np.linalg.norm(cloud, axis=1, keepdims=True)
    return nodes, np.full(len(nodes), 1.0 / len(nodes))


def uniform_sphere(n: int, d: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, d))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


# --- the model -------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PotentialSpec:
    d: int
    beta: float
    Gamma: object = field(default_factory=SqrtOnePlusR2)
    gamma: object = field(default_factory=UniformGamma)
    r0: float = 1.0
    theta0: Optional[Sequence[float]] = None
    validate: bool = True

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise DomainError(f"dimension must be an integer >= 2, got {self.d}")
        object.__setattr__(self, "d", int(self.d))
        object.__setattr__(self, "beta", float(self.beta))
        if not self.r0 > 0:
            raise DomainError(f"initial radius must be positive, got {self.r0}")
        theta0 = np.zeros(self.d) if self.theta0 is None else np.asarray(self.theta0, dtype=float)
        if self.theta0 is None:
            theta0[0] = 1.0
        if theta0.shape != (self.d,) or abs(np.linalg.norm(theta0) - 1.0) > 1e-9:
            raise DomainError("theta0 must be a unit vector of length d")
        object.__setattr__(self, "theta0", theta0 / np.linalg.norm(theta0))
        if isinstance(self.gamma, TiltedGamma) and self.gamma.u0.shape != (self.d,):
            raise ConfigError("gamma tilt direction must have length d")
        if self.validate and self.beta <= self.d - 2 + BOUNDARY_TOL:
            raise UnsupportedRegimeError(
                f"beta={self.beta} must exceed d-2={self.d - 2}; the scale function is not a bijection"
            )
        if float(np.asarray(self.Gamma.value(0.0))) <= 0:
            raise DomainError("Gamma(0) must be positive")

    @property
    def exponent(self) -> float:
        """beta + 2 - d, the growth exponent of h."""
        return self.beta + 2.0 - self.d

    @property
    def v0(self) -> np.ndarray:
        return self.r0 * self.theta0

    @cached_property
    def tables(self) -> "ScaleTables":
        return ScaleTables(self)

    @cached_property
    def constants(self) -> "ModelConstants":
        return compute_constants(self)

    def prepare(self) -> "PotentialSpec":
        """Build cached tables and constants before the model is shared with workers."""
        self.tables
        self.constants
        return self

    def to_config(self) -> dict:
        cfg = {"d": self.d, "beta": self.beta, "r0": self.r0, "theta0": self.theta0.tolist()}
        profile = self.Gamma.to_config()
        if isinstance(profile, dict):
            cfg.update(profile)
        else:
            cfg["profile"] = profile
        cfg["gamma"] = self.gamma.to_config()
        return cfg


def free_spec(d: int, r0: float = 1.0, theta0=None) -> PotentialSpec:
    """Force-free model (beta = 0): the velocity is a Brownian motion."""
    return PotentialSpec(d=d, beta=0.0, r0=r0, theta0=theta0, validate=False)


def _as_rows(spec: PotentialSpec, v):
    v = np.asarray(v, dtype=float)
    rows = np.atleast_2d(v)
    if rows.shape[-1] != spec.d:
        raise DomainError(f"expected vectors of length {spec.d}")
    r = np.linalg.norm(rows, axis=1)
    if np.any(r == 0):
        raise DomainError("U and F are undefined at the zero vector")
    return rows, r, v.ndim == 1


def eval_U(spec: PotentialSpec, v):
    rows, r, single = _as_rows(spec, v)
    out = spec.Gamma.value(r) * spec.gamma.value(rows / r[:, None])
    return float(out[0]) if single else out


def force_rows(spec: PotentialSpec, rows: np.ndarray, r: np.ndarray) -> np.ndarray:
    theta = rows / r[:, None]
    radial = spec.Gamma.derivative(r) / spec.Gamma.value(r)
    out = radial[:, None] * theta
    if not spec.gamma.is_uniform:
        tangential = tangent_projection(theta, spec.gamma.grad(theta))
        out += tangential / (r * spec.gamma.value(theta))[:, None]
    return out


def eval_F(spec: PotentialSpec, v):
    """grad log U(v)."""
    rows, r, single = _as_rows(spec, v)
    out = force_rows(spec, rows, r)
    return out[0] if single else out


# --- constants -------------------------------------------------------------

def _radial_log_integral(log_integrand: Callable, breakpoints=()):
    """Integrate exp(log_integrand(s)) over the real line in s = log r."""
    cuts = sorted({0.0, *[float(b) for b in breakpoints]})
    edges = [-np.inf, *cuts, np.inf]
    total, err = 0.0, 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        val, e = integrate.quad(lambda s: math.exp(log_integrand(s)), lo, hi,
                                epsabs=0.0, epsrel=1e-12, limit=500)
        total += val
        err += e
    return total, err


def radial_moment(spec: PotentialSpec, power: float, gamma_power: float):
    """(value, abserr) of int_0^inf r^power Gamma(r)^gamma_power dr."""
    decay = power + 1.0 + gamma_power
    if decay >= 0:
        raise ConstantUndefinedError(
            f"int r^{power} Gamma^{gamma_power} dr diverges (need power+1+gamma_power < 0)"
        )
    profile = spec.Gamma
    return _radial_log_integral(lambda s: (power + 1.0) * s + gamma_power * float(profile.log_value_at_log(s)))


@dataclass(frozen=True)
class ModelConstants:
    d: int
    beta: float
    a_beta: float
    M_beta: np.ndarray
    alpha: float
    sphere_area: float
    quad_errors: dict
    b_beta_value: Optional[float] = None
    kappa_value: Optional[float] = None
    m_beta_prime_value: Optional[float] = None

    def _need(self, value, name, condition):
        if value is None:
            raise ConstantUndefinedError(f"{name} is undefined for d={self.d}, beta={self.beta} (requires {condition})")
        return value

    @property
    def b_beta(self) -> float:
        return self._need(self.b_beta_value, "b_beta", "beta > d")

    @property
    def c_beta_product(self) -> float:
        """a_beta * b_beta: normalizer relative to surface measure on the sphere."""
        return self.a_beta * self.b_beta

    @property
    def c_beta(self) -> float:
        """Lebesgue-density normalizer of mu_beta."""
        return self.c_beta_product / self.sphere_area

    @property
    def kappa(self) -> float:
        return self._need(self.kappa_value, "kappa", "beta > d")

    @property
    def m_beta_prime(self) -> float:
        return self._need(self.m_beta_prime_value, "m'_beta", "beta > 1 + d")

    @property
    def m_beta(self) -> np.ndarray:
        return self.M_beta * self.m_beta_prime

    @property
    def critical_centering_c(self) -> float:
        if abs(self.beta - (1 + self.d)) > BOUNDARY_TOL:
            raise ConstantUndefinedError("the critical centering constant is defined only at beta = 1 + d")
        return 1.0 / (9.0 * self.kappa)

    def as_dict(self) -> dict:
        out = {"d": self.d, "beta": self.beta, "a_beta": self.a_beta, "M_beta": self.M_beta.tolist(),
               "alpha": self.alpha, "quad_errors": self.quad_errors}
        for name in ("b_beta", "c_beta", "kappa", "m_beta_prime"):
            try:
                out[name] = getattr(self, name)
            except ConstantUndefinedError:
                out[name] = None
        return out


def compute_constants(spec: PotentialSpec) -> ModelConstants:
    d, beta = spec.d, spec.beta
    nodes, weights = sphere_nodes(d)
    wgamma = weights * spec.gamma.value(nodes) ** (-beta)
    sphere_mass = float(np.sum(wgamma))
    a_beta = 1.0 / sphere_mass
    M_beta = a_beta * (wgamma @ nodes)
    if spec.gamma.is_uniform:
        M_beta = np.zeros(d)
    errors = {}
    b_beta = kappa = m_prime = None
    if beta > d + BOUNDARY_TOL:
        i0, e0 = radial_moment(spec, d - 1.0, -beta)
        errors["radial_mass"] = e0 / i0
        b_beta = 1.0 / i0
        kappa = i0 / spec.exponent
        if beta > 1 + d + BOUNDARY_TOL:
            i1, e1 = radial_moment(spec, float(d), -beta)
            errors["radial_first_moment"] = e1 / i1
            m_prime = i1 / i0
    for name, rel in errors.items():
        if rel > QUAD_REL_TARGET:
            logger.warning("quadrature %s relative error %.2e exceeds %.0e", name, rel, QUAD_REL_TARGET)
    return ModelConstants(d=d, beta=beta, a_beta=a_beta, M_beta=M_beta, alpha=spec.exponent / 3.0,
                          sphere_area=sphere_area(d), quad_errors=errors, b_beta_value=b_beta,
                          kappa_value=kappa, m_beta_prime_value=m_prime)


def mu_beta_density(spec: PotentialSpec, v):
    """Lebesgue density c_beta U(v)^-beta of the invariant law."""
    c = spec.constants.c_beta
    return c * np.asarray(eval_U(spec, v)) ** (-spec.beta)


def nu_prime_density(spec: PotentialSpec, r):
    r = np.asarray(r, dtype=float)
    return spec.constants.b_beta * r ** (spec.d - 1) * spec.Gamma.value(r) ** (-spec.beta)


def mu_average(spec: PotentialSpec, phi: Callable, breakpoints=(), n_sphere: Optional[int] = None) -> float:
    """int phi d(mu_beta) as the product nu'_beta x nu_beta.

    phi maps an (n, d) array of velocities to n values. Radii where phi jumps
    should be passed as breakpoints.
    """
    const = spec.constants
    nodes, weights = sphere_nodes(spec.d, n_sphere)
    wgamma = const.a_beta * weights * spec.gamma.value(nodes) ** (-spec.beta)
    b, beta, d = const.b_beta, spec.beta, spec.d
    profile = spec.Gamma

    def log_radial(s):
        return math.log(b) + d * s - beta * float(profile.log_value_at_log(s))

    def integrand(s):
        weight = math.exp(log_radial(s))
        if weight == 0.0:
            return 0.0
        return weight * float(wgamma @ phi(math.exp(s) * nodes))

    total = 0.0
    cuts = sorted({0.0, *[math.log(x) for x in breakpoints]})
    edges = [-np.inf, *cuts, np.inf]
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += integrate.quad(integrand, lo, hi, epsabs=1e-13, epsrel=1e-10, limit=500)[0]
    return total


def sample_nu_beta(spec: PotentialSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Directions from nu_beta by rejection from the uniform sphere."""
    if spec.gamma.is_uniform:
        return uniform_sphere(n, spec.d, rng)
    envelope = spec.gamma.min_value ** (-spec.beta)
    efficiency = 1.0 / (spec.constants.a_beta * envelope)
    if efficiency < 1e-3:
        raise DomainError(f"rejection efficiency {efficiency:.1e} below 1e-3; supply a tighter envelope for gamma")
    out = np.empty((0, spec.d))
    while len(out) < n:
        batch = max(16, int(1.2 * (n - len(out)) / efficiency))
        proposal = uniform_sphere(batch, spec.d, rng)
        accept = rng.random(batch) * envelope < spec.gamma.value(proposal) ** (-spec.beta)
        out = np.vstack([out, proposal[accept]])
    return out[:n]


# --- scale function tables -------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


class CumulativeLogTable:
    """G(s) = int_{s0}^s exp(g(u)) du, tabulated on a grid in s = log r.

    Segment totals come from adaptive quadrature; partial segments use a
    16-point Gauss-Legendre rule, so grids keep |g'| * step small.
    """

    def __init__(self, log_f: Callable, nodes: np.ndarray, origin_index: int):
        self.log_f = log_f
        self.nodes = nodes
        pieces = np.array([
            integrate.quad(lambda u: math.exp(float(log_f(u))), a, b, epsabs=0.0, epsrel=1e-13, limit=200)[0]
            for a, b in zip(nodes[:-1], nodes[1:])
        ])
        cum = np.concatenate([[0.0], np.cumsum(pieces)])
        self.cum = cum - cum[origin_index]

    @property
    def lower(self) -> float:
        return float(self.cum[0])

    @property
    def upper(self) -> float:
        return float(self.cum[-1])

    def value(self, s):
        s = np.asarray(s, dtype=float)
        flat = s.reshape(-1)
        lo, hi = self.nodes[0], self.nodes[-1]
        if np.any((flat < lo) | (flat > hi)) or not np.all(np.isfinite(flat)):
            raise RootFindError(f"log-radius outside the tabulated range [{lo:.3g}, {hi:.3g}]")
        k = np.clip(np.searchsorted(self.nodes, flat, side="right") - 1, 0, len(self.nodes) - 2)
        left = self.nodes[k]
        half = 0.5 * (flat - left)
        u = left[:, None] + half[:, None] * (_GL_X + 1.0)
        with np.errstate(under="ignore"):
            part = half * np.sum(_GL_W * np.exp(self.log_f(u)), axis=-1)
        return (self.cum[k] + part).reshape(s.shape)

    def inverse(self, w, tol: float = 1e-12, max_iter: int = 80):
        """Safeguarded Newton within the cached bracket."""
        shape = np.shape(w)
        w = np.asarray(w, dtype=float).reshape(-1)
        if np.any((w < self.cum[0]) | (w > self.cum[-1])) or not np.all(np.isfinite(w)):
            bad = w[(w < self.cum[0]) | (w > self.cum[-1]) | ~np.isfinite(w)]
            raise RootFindError(
                f"no bracket for {bad.ravel()[:3]}: table spans [{self.cum[0]:.6g}, {self.cum[-1]:.6g}]"
            )
        k = np.clip(np.searchsorted(self.cum, w, side="right") - 1, 0, len(self.cum) - 2)
        lo, hi = self.nodes[k].copy(), self.nodes[k + 1].copy()
        span = self.cum[k + 1] - self.cum[k]
        s = lo + np.where(span > 0, (w - self.cum[k]) / np.where(span > 0, span, 1.0), 0.5) * (hi - lo)
        for _ in range(max_iter):
            f = self.value(s) - w
            collapsed = (hi - lo) <= 4.0 * np.finfo(float).eps * np.maximum(1.0, np.abs(s))
            done = (np.abs(f) <= tol * (1.0 + np.abs(w))) | collapsed
            if np.all(done):
                return s.reshape(shape)
            lo = np.where(f < 0, s, lo)
            hi = np.where(f > 0, s, hi)
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                step = s - f / np.exp(self.log_f(s))
            bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
            s = np.where(done, s, np.where(bad, 0.5 * (lo + hi), step))
        worst = int(np.argmax(np.abs(self.value(s) - w).ravel()))
        raise RootFindError(
            f"root-find did not converge for w={w.ravel()[worst]:.6g}; "
            f"bracket [{lo.ravel()[worst]:.17g}, {hi.ravel()[worst]:.17g}] in log-radius"
        )


class ScaleTables:
    """Cached h and the antiderivative of sigma^-2, both in log-radius."""

    def __init__(self, spec: PotentialSpec):
        k = spec.exponent
        if k <= 0:
            raise UnsupportedRegimeError("scale function requires beta > d - 2")
        self.log_k = math.log(k)
        self.d = spec.d
        self.beta = spec.beta
        self.profile = spec.Gamma
        self.s0 = math.log(spec.r0)
        nodes, origin = self._grid()
        self.h = CumulativeLogTable(self.log_h_rate, nodes, origin)
        self.k_integral = CumulativeLogTable(self.log_k_rate, nodes, origin)
        logger.debug("scale tables: %d nodes, h in [%.3g, %.3g]", len(nodes), self.h.lower, self.h.upper)

    def log_h_rate(self, s):
        """log of d h(e^s) / ds."""
        return self.log_k + (2.0 - self.d) * s + self.beta * self.profile.log_value_at_log(s)

    def log_k_rate(self, s):
        return self.d * s - self.log_k - self.beta * self.profile.log_value_at_log(s)

    def _step(self, s, previous):
        elasticity = float(self.profile.elasticity_at_log(s))
        rate_h = abs(2.0 - self.d + self.beta * elasticity)
        rate_k = abs(self.d - self.beta * elasticity) if s > self.s0 - 40.0 else 0.0
        return min(1.3 * previous, 1.5 / max(rate_h, rate_k, 1e-6))

    def _walk(self, direction):
        points, s, step, total = [], self.s0, 0.05, 0.0
        while abs(total) < SCALE_W_MAX:
            step = self._step(s, step)
            nxt = s + direction * step
            if nxt > _S_MAX:
                break
            piece = integrate.quad(lambda u: math.exp(float(self.log_h_rate(u))), min(s, nxt), max(s, nxt),
                                   epsabs=0.0, epsrel=1e-10, limit=200)[0]
            total += direction * piece
            s = nxt
            points.append(s)
        return points

    def _grid(self):
        below = self._walk(-1.0)[::-1]
        above = self._walk(1.0)
        return np.array(below + [self.s0] + above), len(below)


def scale_h_log(spec: PotentialSpec, s):
    """h(e^s)."""
    return spec.tables.h.value(s)


def scale_h(spec: PotentialSpec, r):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise DomainError("h is defined for r > 0 only")
    out = scale_h_log(spec, np.log(r))
    return float(out) if out.ndim == 0 else out


def scale_h_inv_log(spec: PotentialSpec, w):
    """log h^-1(w); finite even where h^-1(w) underflows (d = 2, w << 0)."""
    return spec.tables.h.inverse(w)


def scale_h_inv(spec: PotentialSpec, w):
    out = np.exp(scale_h_inv_log(spec, w))
    return float(out) if out.ndim == 0 else out


def log_scale_sigma(spec: PotentialSpec, w):
    s = scale_h_inv_log(spec, w)
    return spec.tables.log_h_rate(s) - s


def scale_sigma(spec: PotentialSpec, w):
    with np.errstate(over="ignore"):
        out = np.exp(log_scale_sigma(spec, w))
    return float(out) if out.ndim == 0 else out


def sigma_inv2(spec: PotentialSpec, w):
    """sigma(w)^-2, computed in log form."""
    with np.errstate(under="ignore"):
        return np.exp(-2.0 * log_scale_sigma(spec, w))


def scale_psi(spec: PotentialSpec, w):
    s = scale_h_inv_log(spec, w)
    with np.errstate(over="ignore"):
        out = np.exp(2.0 * spec.tables.log_h_rate(s))
    return float(out) if out.ndim == 0 else out


def sigma_inv2_integral(spec: PotentialSpec, z):
    """int_0^z sigma(u)^-2 du."""
    return spec.tables.k_integral.value(scale_h_inv_log(spec, z))


def _scale_space_integral(spec: PotentialSpec, weight: Callable) -> float:
    """int weight(z) sigma(z)^-2 dz over the tabulated range of h, with z = sinh(t)."""
    table = spec.tables.h

    def integrand(t):
        z = math.sinh(t)
        return float(weight(z) * sigma_inv2(spec, z)) * math.cosh(t)

    lo, hi = math.asinh(table.lower), math.asinh(table.upper)
    cuts = [lo, *[c for c in (-10.0, -3.0, 0.0, 3.0, 10.0) if lo < c < hi], hi]
    return sum(integrate.quad(integrand, a, b, epsabs=0.0, epsrel=1e-10, limit=500)[0]
               for a, b in zip(cuts[:-1], cuts[1:]))


def kappa_in_scale_space(spec: PotentialSpec) -> float:
    """kappa as int sigma^-2 dz, independent of the radial quadrature."""
    return _scale_space_integral(spec, lambda z: 1.0)


def m_prime_in_scale_space(spec: PotentialSpec) -> float:
    if spec.beta <= 1 + spec.d + BOUNDARY_TOL:
        raise ConstantUndefinedError("m'_beta is defined only for beta > 1 + d")
    return _scale_space_integral(spec, lambda z: scale_h_inv(spec, z)) / kappa_in_scale_space(spec)


def mu_average_lebesgue(spec: PotentialSpec, phi: Callable, r_max: float = np.inf) -> float:
    """int phi(v) c_beta U(v)^-beta dv in polar coordinates (d = 2 only)."""
    if spec.d != 2:
        raise DomainError("Lebesgue-polar averages are implemented for d = 2")

    def integrand(angle, r):
        v = np.array([[r * math.cos(angle), r * math.sin(angle)]])
        return float(phi(v)[0] * mu_beta_density(spec, v)[0]) * r

    total = 0.0
    for lo, hi in ((0.0, 1.0), (1.0, 5.0), (5.0, r_max)):
        total += integrate.dblquad(integrand, lo, hi, 0.0, 2.0 * math.pi, epsabs=1e-12, epsrel=1e-10)[0]
    return total


# --- regimes ---------------------------------------------------------------

class RegimeTag(str, Enum):
    DIFFUSIVE = "Diffusive"
    CRITICAL_DIFFUSIVE = "CriticalDiffusive"
    STABLE = "Stable"
    CRITICAL_STABLE_1 = "CriticalStable1"
    CRITICAL_STABLE_23 = "CriticalStable23"
    BESSEL = "Bessel"


@dataclass(frozen=True, eq=False)
class Regime:
    tag: RegimeTag
    d: int
    beta: float
    alpha: Optional[float]
    drift: np.ndarray
    centering_kind: str

    def scaling(self, eps: float) -> float:
        log_eps = abs(math.log(eps))
        if self.tag is RegimeTag.DIFFUSIVE:
            return math.sqrt(eps)
        if self.tag is RegimeTag.CRITICAL_DIFFUSIVE:
            return math.sqrt(eps / log_eps)
        if self.tag is RegimeTag.STABLE:
            return eps ** (1.0 / self.alpha)
        if self.tag is RegimeTag.CRITICAL_STABLE_1:
            return eps
        if self.tag is RegimeTag.CRITICAL_STABLE_23:
            return (eps * log_eps) ** 1.5
        return eps ** 1.5

    def centering(self, eps: float, t: float) -> np.ndarray:
        if self.centering_kind == "linear":
            return self.drift * t / eps
        if self.centering_kind == "log":
            return self.drift * abs(math.log(eps)) * t / eps
        return np.zeros(self.d)

    @property
    def target_slope(self) -> float:
        """Power of 1/eps in the growth of X_{t/eps}."""
        if self.tag in (RegimeTag.DIFFUSIVE, RegimeTag.CRITICAL_DIFFUSIVE):
            return 0.5
        if self.tag is RegimeTag.BESSEL:
            return 1.5
        return 1.0 / self.alpha

    def log_factor(self, eps: float) -> float:
        """scaling(eps) / eps^target_slope."""
        log_eps = abs(math.log(eps))
        if self.tag is RegimeTag.CRITICAL_DIFFUSIVE:
            return log_eps ** -0.5
        if self.tag is RegimeTag.CRITICAL_STABLE_23:
            return log_eps ** 1.5
        return 1.0


def classify_regime(spec: PotentialSpec) -> Regime:
    d, beta = spec.d, spec.beta
    if beta <= d - 2 + BOUNDARY_TOL:
        raise UnsupportedRegimeError(f"beta={beta} <= d-2={d - 2} is outside every supported regime")
    alpha = spec.exponent / 3.0
    zero = np.zeros(d)

    def near(x):
        return abs(beta - x) <= BOUNDARY_TOL

    if near(4 + d):
        return Regime(RegimeTag.CRITICAL_DIFFUSIVE, d, beta, None, spec.constants.m_beta, "linear")
    if beta > 4 + d:
        return Regime(RegimeTag.DIFFUSIVE, d, beta, None, spec.constants.m_beta, "linear")
    if near(1 + d):
        const = spec.constants
        return Regime(RegimeTag.CRITICAL_STABLE_1, d, beta, 1.0, const.critical_centering_c * const.M_beta, "log")
    if beta > 1 + d:
        return Regime(RegimeTag.STABLE, d, beta, alpha, spec.constants.m_beta, "linear")
    if near(d):
        return Regime(RegimeTag.CRITICAL_STABLE_23, d, beta, 2.0 / 3.0, zero, "none")
    if beta > d:
        return Regime(RegimeTag.STABLE, d, beta, alpha, zero, "none")
    return Regime(RegimeTag.BESSEL, d, beta, None, zero, "none")


# --- configuration ---------------------------------------------------------

def read_config_file(path: str) -> dict:
    ext = os.path.splitext(path)[1].lower()
    try:
        if ext == ".toml":
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def load_model_config(source) -> PotentialSpec:
    """Build a PotentialSpec from a config dict or a .json / .toml file."""
    cfg = read_config_file(source) if isinstance(source, (str, os.PathLike)) else dict(source)
    try:
        d = int(cfg["d"])
        beta = float(cfg["beta"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("model config needs numeric 'd' and 'beta'") from exc

    profile = cfg.get("profile", "sqrt1pr2")
    if profile == "sqrt1pr2":
        Gamma = SqrtOnePlusR2()
    elif profile == "custom-table":
        table = cfg.get("table")
        if table is None and cfg.get("table_file"):
            table = np.loadtxt(cfg["table_file"], delimiter=",")
        if table is None:
            raise ConfigError("custom-table profile needs 'table' or 'table_file'")
        table = np.asarray(table, dtype=float)
        Gamma = TableProfile(table[:, 0], table[:, 1])
    else:
        raise ConfigError(f"unknown radial profile {profile!r}")

    gamma_cfg = cfg.get("gamma", "uniform")
    if gamma_cfg == "uniform":
        gamma = UniformGamma()
    elif isinstance(gamma_cfg, dict):
        gamma = TiltedGamma(float(gamma_cfg["eta"]), gamma_cfg.get("u0", [1.0] + [0.0] * (d - 1)))
    else:
        raise ConfigError(f"unknown angular profile {gamma_cfg!r}")

    return PotentialSpec(d=d, beta=beta, Gamma=Gamma, gamma=gamma,
                         r0=float(cfg.get("r0", 1.0)), theta0=cfg.get("theta0"))
