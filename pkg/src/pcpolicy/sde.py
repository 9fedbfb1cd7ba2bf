"""Euler-Maruyama simulation of the controlled diffusion and Monte Carlo costs.

Every path owns a Philox stream keyed by ``(seed, path_index)``, so an
estimate does not depend on how paths are batched or scheduled across
workers.  Paths are simulated in fixed-size chunks; chunk boundaries never
depend on the worker count.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lattice import ValueSurface
from .model import ControlProblem, ProblemError

CHUNK = 1024


class PathError(RuntimeError):
    def __init__(self, message, path_index=None):
        super().__init__(message)
        self.path_index = path_index


@dataclass(frozen=True)
class PiecewisePolicy:
    """Controls held constant on consecutive intervals of ``interval_length``.

    Intervals are counted from the start time of the simulation.  In
    ``open_loop`` mode ``controls[j]`` is the index used on interval ``j``; in
    ``feedback`` mode ``fields[j]`` is read at the state at the start of
    interval ``j`` (nearest grid node).
    """

    interval_length: float
    mode: str = "open_loop"
    controls: tuple = ()
    fields: tuple = ()

    def __post_init__(self):
        if not self.interval_length > 0:
            raise ProblemError("policy interval length must be positive")
        if self.mode not in ("open_loop", "feedback"):
            raise ProblemError(f"unknown policy mode {self.mode!r}")
        object.__setattr__(self, "controls", tuple(int(c) for c in self.controls))
        object.__setattr__(self, "fields", tuple(self.fields))

    @classmethod
    def open_loop(cls, interval_length: float, controls: Sequence[int]) -> "PiecewisePolicy":
        return cls(interval_length, "open_loop", tuple(controls))

    @classmethod
    def constant(cls, interval_length: float, control: int, intervals: int) -> "PiecewisePolicy":
        return cls(interval_length, "open_loop", (control,) * intervals)

    @classmethod
    def from_surface(cls, surface: ValueSurface, start_time: float,
                     interval_length: float) -> "PiecewisePolicy":
        """Feedback policy reading the solver's argmax at every interval start."""
        horizon = surface.times[-1]
        n = int(round((horizon - start_time) / interval_length))
        fields = [surface.policies[surface.level(start_time + j * interval_length)]
                  for j in range(n)]
        if any(f is None for f in fields):
            raise ProblemError("surface has no policy at some interval start")
        return cls(interval_length, "feedback", fields=tuple(fields))

    @property
    def n_intervals(self) -> int:
        return len(self.controls) if self.mode == "open_loop" else len(self.fields)

    def validate(self, problem: ControlProblem) -> None:
        if self.mode == "open_loop":
            bad = [c for c in self.controls if not 0 <= c < problem.n_controls]
        else:
            bad = [int(f.indices.max()) for f in self.fields
                   if f.indices.min() < 0 or f.indices.max() >= problem.n_controls]
        if bad:
            raise ProblemError(f"policy uses invalid control indices {bad}")

    def indices_at(self, interval: int, states: np.ndarray) -> np.ndarray:
        if self.mode == "open_loop":
            return np.full(len(states), self.controls[interval], dtype=np.int64)
        return self.fields[interval].lookup(states)


@dataclass
class PathSample:
    times: np.ndarray
    states: np.ndarray
    accumulated_cost: float
    cost_trace: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    std_error: float
    path_count: int
    seed: int

    def within(self, target: float, k: float = 3.0, slack: float = 0.0) -> bool:
        return abs(self.mean - target) <= k * self.std_error + slack


def _time_grid(t0: float, horizon: float, interval: float, spi: int):
    if spi < 1:
        raise ProblemError("steps_per_interval must be at least 1")
    if t0 > horizon:
        raise ProblemError(f"start time {t0} beyond horizon {horizon}")
    tau = horizon - t0
    dt = interval / spi
    n = max(0, math.ceil(tau / dt - 1e-9))
    times = t0 + dt * np.arange(n + 1)
    if n:
        times[-1] = horizon
    return times, n


def path_normals(seed: int, path_index: int, n_steps: int, p: int) -> np.ndarray:
    """Standard normals for one path from its own counter-based stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss)).standard_normal((n_steps, p))


def _simulate_chunk(problem, policy, t0, x0, spi, seed, first_path, n_paths, record=False):
    times, n = _time_grid(t0, problem.horizon, policy.interval_length, spi)
    needed = math.ceil(n / spi) if n else 0
    if policy.n_intervals < needed:
        raise ProblemError(f"policy covers {policy.n_intervals} intervals, {needed} needed")
    d, p = problem.state_dim, problem.noise_dim
    noise = np.stack([path_normals(seed, first_path + i, n, p) for i in range(n_paths)])
    x = np.tile(np.asarray(x0, dtype=float).reshape(1, d), (n_paths, 1))
    # Neumaier-compensated running cost keeps the quadrature sum exact for
    # constant integrands.
    cost = np.zeros(n_paths)
    comp = np.zeros(n_paths)
    trace_x = [x.copy()] if record else None
    trace_c = [np.zeros(n_paths)] if record else None
    ctrl = None
    for k in range(n):
        t = float(times[k])
        dt = float(times[k + 1] - times[k])
        if k % spi == 0:
            ctrl = policy.indices_at(k // spi, x)
        drift = np.empty((n_paths, d))
        vol = np.empty((n_paths, d, p))
        run = np.empty(n_paths)
        for a in np.unique(ctrl):
            sel = ctrl == a
            xs = x[sel]
            drift[sel] = problem.b(t, xs, int(a))
            vol[sel] = problem.sigma(t, xs, int(a))
            run[sel] = problem.f(t, xs, int(a))
        incr = run * dt
        y = incr - comp
        s = cost + y
        comp = (s - cost) - y
        cost = s
        x = x + drift * dt + np.einsum("nij,nj->ni", vol, noise[:, k]) * math.sqrt(dt)
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            raise PathError(f"non-finite state on path {first_path + i} at t={times[k + 1]}",
                            first_path + i)
        if record:
            trace_x.append(x.copy())
            trace_c.append(cost - comp)
    cost = cost - comp
    if record:
        return times, np.stack(trace_x, axis=1), cost, np.stack(trace_c, axis=1)
    return x, cost


def simulate_path(problem: ControlProblem, policy: PiecewisePolicy, start, steps_per_interval: int,
                  seed: int, path_index: int = 0) -> PathSample:
    """Simulate a single path from ``start = (t, x)``."""
    policy.validate(problem)
    t0, x0 = start
    times, states, cost, trace = _simulate_chunk(problem, policy, float(t0), x0, steps_per_interval,
                                                 seed, path_index, 1, record=True)
    return PathSample(times - float(t0), states[0], float(cost[0]), trace[0])


def mc_cost(problem: ControlProblem, policy: PiecewisePolicy, start, path_count: int,
            steps_per_interval: int, seed: int, workers: int = 1,
            chunk: int = CHUNK) -> MCEstimate:
    """Monte Carlo estimate of running plus terminal cost under ``policy``.

    Paths are processed in batches of ``chunk``; neither ``chunk`` nor
    ``workers`` changes any per-path result.
    """
    if path_count < 2:
        raise ProblemError("path_count must be at least 2")
    policy.validate(problem)
    t0, x0 = float(start[0]), start[1]
    starts = list(range(0, path_count, chunk))

    def run(first):
        n = min(chunk, path_count - first)
        x, cost = _simulate_chunk(problem, policy, t0, x0, steps_per_interval, seed, first, n)
        return cost + problem.g(x)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    payoff = np.concatenate(parts)
    mean = math.fsum(payoff) / path_count
    var = math.fsum((payoff - mean) ** 2) / (path_count - 1)
    return MCEstimate(mean, math.sqrt(var / path_count), path_count, int(seed))


def write_path_csv(sample: PathSample, path) -> None:
    d = sample.states.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [f"x_{k + 1}" for k in range(d)] + ["cost"])
        for t, x, c in zip(sample.times, sample.states, sample.cost_trace):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in x] + [repr(float(c))])


# ---------------------------------------------------------------------------
# Shaken coefficients

@dataclass(frozen=True)
class ShakeSequence:
    """Piecewise constant shifts ``(e1, e2)`` of the coefficient arguments.

    Shift ``j`` is active on ``[j * interval_length, (j + 1) * interval_length)``
    in absolute time; the last shift stays active past the end.
    """

    interval_length: float
    shifts: tuple
    epsilon: float

    def __post_init__(self):
        if not self.interval_length > 0:
            raise ProblemError("shake interval length must be positive")
        if self.epsilon < 0:
            raise ProblemError("epsilon must be nonnegative")
        if not self.shifts:
            raise ProblemError("shake needs at least one shift")
        clean = []
        for e1, e2 in self.shifts:
            e1 = float(e1)
            e2 = np.atleast_1d(np.asarray(e2, dtype=float))
            if not (e1 == 0.0 or -self.epsilon ** 2 < e1 < 0.0):
                raise ProblemError(f"time shift {e1} outside (-eps^2, 0]")
            if np.linalg.norm(e2) > self.epsilon * (1 + 1e-12):
                raise ProblemError(f"space shift of norm {np.linalg.norm(e2)} exceeds eps")
            clean.append((e1, e2))
        object.__setattr__(self, "shifts", tuple(clean))

    def active(self, t: float):
        j = int(math.floor(t / self.interval_length + 1e-12))
        return self.shifts[min(max(j, 0), len(self.shifts) - 1)]


def shaken_problem(problem: ControlProblem, shake: ShakeSequence) -> ControlProblem:
    """Problem whose drift and diffusion read ``(t + e1, x + e2)``.

    Shifted times below zero are clamped to zero.
    """
    if len(shake.shifts) * shake.interval_length < problem.horizon * (1 - 1e-12):
        raise ProblemError("shake does not cover the horizon")
    for _, e2 in shake.shifts:
        if e2.shape != (problem.state_dim,):
            raise ProblemError("space shift dimension does not match the state")
    b0, s0 = problem.drift, problem.diffusion

    def drift(t, x, a):
        e1, e2 = shake.active(t)
        return b0(max(t + e1, 0.0), x + e2, a)

    def diffusion(t, x, a):
        e1, e2 = shake.active(t)
        return s0(max(t + e1, 0.0), x + e2, a)

    return problem.with_coefficients(drift, diffusion, name=f"{problem.name}+shake")
