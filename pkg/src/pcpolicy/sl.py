"""Semi-Lagrangian dynamic programming on a grid.

One step of the scheme replaces the expectation over a Brownian increment by
an exact finite sum over the atoms of a discrete displacement ``zeta`` and
reads the continuation value by multilinear interpolation:

    V(t, x) = max_a { f_a(t, x) h + sum_j w_j V(t + h, x + b_a h + sigma_a zeta_j) }

``pcp_solve`` keeps each control frozen for ``m`` consecutive steps and only
maximises at the start of every policy interval, which computes the value of
piecewise constant policies on the same lattice.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .lattice import PolicyField, SpatialGrid, ValueField, ValueSurface, interpolate_many, sample_field
from .model import ControlProblem


class SchemeError(RuntimeError):
    """Numerical failure inside a scheme step."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ZetaSupport:
    """Finite law of ``zeta``: ``atoms[j]`` in R^p with probability ``probs[j]``.

    ``signs`` is set for the standard ``+-sqrt(h)`` support so that moments can
    be evaluated without rounding (coordinates are ``signs * sqrt(h)``).
    """

    p: int
    h: float
    atoms: np.ndarray
    probs: np.ndarray
    signs: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.probs <= 0):
            raise ConfigError("atom probabilities must be positive")
        if abs(math.fsum(self.probs) - 1.0) > 1e-15:
            raise ConfigError("atom probabilities must sum to one")

    def __iter__(self):
        return zip(self.atoms, self.probs)


def zeta_support(p: int, h: float) -> ZetaSupport:
    """Tensor two-point law ``P(zeta_i = +-sqrt(h)) = 1/2``, independent coordinates."""
    if p <= 0:
        raise ConfigError(f"dimension must be positive, got {p}")
    if not h > 0:
        raise ConfigError(f"step must be positive, got {h}")
    signs = np.array(list(itertools.product((1.0, -1.0), repeat=p)))
    return ZetaSupport(p, h, signs * math.sqrt(h), np.full(2 ** p, 0.5 ** p), signs)


@dataclass(frozen=True)
class MomentReport:
    mean_norm: float
    second_moment_error: float
    higher_moment_max: float
    k_max: int

    def constant(self, h: float) -> float:
        """Smallest C with all moment conditions holding as ``<= C h^2``."""
        return max(self.second_moment_error, self.higher_moment_max) / h ** 2


def coordinate_moments(support: ZetaSupport, k: int) -> np.ndarray:
    """``E[zeta_i^k]`` for each coordinate i."""
    if support.signs is None:
        return support.probs @ support.atoms ** k
    scale = support.h ** (k // 2) * (math.sqrt(support.h) if k % 2 else 1.0)
    return (support.probs @ support.signs ** k) * scale


def moment_report(support: ZetaSupport, k_max: int = 4) -> MomentReport:
    if k_max < 3:
        raise ConfigError("k_max must be at least 3")
    mean = coordinate_moments(support, 1)
    if support.signs is None:
        second = np.einsum("j,ji,jk->ik", support.probs, support.atoms, support.atoms)
    else:
        second = np.einsum("j,ji,jk->ik", support.probs, support.signs, support.signs) * support.h
    err2 = np.abs(second - support.h * np.eye(support.p))
    higher = max(float(np.max(np.abs(coordinate_moments(support, k))))
                 for k in range(3, k_max + 1))
    return MomentReport(float(np.linalg.norm(mean)), float(np.max(err2)), higher, k_max)


@dataclass(frozen=True, eq=False)
class SchemeConfig:
    """Time step ``h``, grid, and ``substeps = h_pol / h`` for policy intervals."""

    h: float
    grid: SpatialGrid
    substeps: int = 1
    workers: int = 1

    @property
    def policy_interval(self) -> float:
        return self.h * self.substeps

    def n_steps(self, horizon: float) -> int:
        if not self.h > 0:
            raise ConfigError("time step must be positive")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ConfigError("substeps must be a positive integer")
        n = horizon / self.h
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError(f"horizon {horizon} is not a multiple of h={self.h}")
        n = int(round(n))
        if n % self.substeps:
            raise ConfigError(
                f"horizon {horizon} is not a multiple of the policy interval {self.policy_interval}")
        return n


def _linear_step(problem: ControlProblem, nxt: ValueField, t: float, h: float, a: int,
                 support: ZetaSupport, nodes: np.ndarray) -> np.ndarray:
    """``f_a h + E[V(t+h, Y)]`` at every node for a fixed control (flat array)."""
    b = problem.b(t, nodes, a)
    s = problem.sigma(t, nodes, a)
    base = nodes + b * h
    acc = np.zeros(len(nodes))
    for atom, w in support:
        acc += w * interpolate_many(nxt, base + s @ atom)
    out = problem.f(t, nodes, a) * h + acc
    bad = ~np.isfinite(out)
    if bad.any():
        k = int(np.argmax(bad))
        raise SchemeError(f"non-finite value at t={t}, node {nodes[k].tolist()}, control {a}")
    return out


def _maximise(candidates: np.ndarray):
    # argmax returns the first maximiser: ties go to the smallest control index.
    idx = np.argmax(candidates, axis=0)
    return np.take_along_axis(candidates, idx[None], axis=0)[0], idx


def sl_step(nxt: ValueField, problem: ControlProblem, t: float, h: float, config: SchemeConfig):
    """One backward step from ``nxt`` (at ``t + h``) to time ``t``.

    Returns the new ``ValueField`` and the ``PolicyField`` of maximising
    control indices.
    """
    if abs(nxt.time_label - (t + h)) > 1e-9 * max(1.0, abs(t) + h):
        raise ConfigError(f"next field is at t={nxt.time_label}, expected {t + h}")
    if t + h > problem.horizon + 1e-9 * max(1.0, problem.horizon):
        raise ConfigError("step would pass the horizon")
    grid = nxt.grid
    nodes = grid.nodes()
    support = zeta_support(problem.noise_dim, h)
    cands = np.stack([_linear_step(problem, nxt, t, h, a, support, nodes)
                      for a in range(problem.n_controls)])
    value, idx = _maximise(cands)
    return ValueField(grid, value, t), PolicyField(grid, idx, t)


def _terminal(problem: ControlProblem, grid: SpatialGrid) -> ValueField:
    return sample_field(problem.g, grid, problem.horizon)


def sl_solve(problem: ControlProblem, config: SchemeConfig) -> ValueSurface:
    """Backward recursion of the scheme with maximisation at every step."""
    if config.substeps != 1:
        raise ConfigError("sl_solve maximises every step; use pcp_solve for substeps > 1")
    n = config.n_steps(problem.horizon)
    levels = [(_terminal(problem, config.grid), None)]
    for k in range(n - 1, -1, -1):
        t = k * config.h
        levels.append(sl_step(levels[-1][0], problem, t, config.h, config))
    surface = ValueSurface()
    for fld, pol in reversed(levels):
        surface.add(fld, pol)
    return surface


def pcp_solve(problem: ControlProblem, config: SchemeConfig) -> ValueSurface:
    """Value of policies held constant over intervals of ``substeps * h``.

    Within an interval every control is propagated by ``substeps`` linear steps
    independently (these runs are what ``workers`` parallelises); the
    nodewise maximum over controls is recorded at every sub-step level, and
    is what the next interval starts from.
    """
    n = config.n_steps(problem.horizon)
    m = int(config.substeps)
    h = config.h
    grid = config.grid
    nodes = grid.nodes()
    support = zeta_support(problem.noise_dim, h)

    def propagate(a, start, first_step):
        out = []
        cur = start
        for k in range(first_step + m - 1, first_step - 1, -1):
            t = k * h
            cur = ValueField(grid, _linear_step(problem, cur, t, h, a, support, nodes), t)
            out.append(cur.values.ravel())
        return out

    current = _terminal(problem, grid)
    levels = [(current, None)]
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for first in range(n - m, -1, -m):
            controls = range(problem.n_controls)
            if pool is None:
                runs = [propagate(a, current, first) for a in controls]
            else:
                runs = list(pool.map(lambda a: propagate(a, current, first), controls))
            for j in range(m):
                t = (first + m - 1 - j) * h
                value, idx = _maximise(np.stack([r[j] for r in runs]))
                levels.append((ValueField(grid, value, t), PolicyField(grid, idx, t)))
            current = levels[-1][0]
    finally:
        if pool is not None:
            pool.shutdown()
    surface = ValueSurface()
    for fld, pol in reversed(levels):
        surface.add(fld, pol)
    return surface


# ---------------------------------------------------------------------------
# Generator and its one-step surrogate

@dataclass(frozen=True)
class SmoothFunction:
    """A test function with exact derivatives; ``x`` is a 1-D state."""

    value: Callable[[float, np.ndarray], float]
    dt: Callable[[float, np.ndarray], float]
    grad: Callable[[float, np.ndarray], np.ndarray]
    hess: Callable[[float, np.ndarray], np.ndarray]


def generator_apply(phi: SmoothFunction, problem: ControlProblem, a: int, t: float, x) -> float:
    """``dt phi + b . grad phi + 1/2 tr(sigma sigma^T hess phi)`` at ``(t, x)``."""
    x = np.asarray(x, dtype=float).reshape(problem.state_dim)
    b = problem.b(t, x[None], a)[0]
    s = problem.sigma(t, x[None], a)[0]
    diffusion = 0.5 * np.trace(s @ s.T @ np.atleast_2d(phi.hess(t, x)))
    return float(phi.dt(t, x) + b @ np.atleast_1d(phi.grad(t, x)) + diffusion)


def truncation_error(phi: SmoothFunction, problem: ControlProblem, a: int, t: float, x,
                     h: float) -> float:
    """``|L_a phi - (E phi(t + h, Y) - phi(t, x)) / h|`` with the exact zeta law."""
    if not h > 0:
        raise ConfigError("h must be positive")
    x = np.asarray(x, dtype=float).reshape(problem.state_dim)
    b = problem.b(t, x[None], a)[0]
    s = problem.sigma(t, x[None], a)[0]
    support = zeta_support(problem.noise_dim, h)
    expectation = math.fsum(w * phi.value(t + h, x + b * h + s @ z) for z, w in support)
    surrogate = (expectation - phi.value(t, x)) / h
    return abs(generator_apply(phi, problem, a, t, x) - surrogate)
