"""Control problems, packaged benchmarks and their reference values.

Coefficient callables are vectorised over the state: ``x`` has shape
``(..., d)`` and the control ``a`` is a 1-D array of length ``m``.  Time is
always a scalar.  The expected return shapes are

    drift(t, x, a)        -> (..., d)
    diffusion(t, x, a)    -> (..., d, p)
    running_cost(t, x, a) -> (...)
    terminal_cost(x)      -> (...)

Returning a scalar (or anything broadcastable) is fine, ``ControlProblem``
broadcasts to the full shape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

Coefficient = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
TerminalCost = Callable[[np.ndarray], np.ndarray]


class ProblemError(ValueError):
    """Raised for ill-posed problem definitions or invalid evaluations."""


class NoClosedForm(ProblemError):
    """The benchmark has no closed-form value; use a fine-grid reference."""


@dataclass(frozen=True)
class Bounds:
    """Declared bounds on the data: ``C0`` for drift/diffusion, ``C1`` for costs."""

    C0: float
    C1: float


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """A finite-horizon stochastic control problem with a finite control set.

    The value is the supremum over controls of the expected running cost plus
    terminal cost.  Instances are immutable and safe to share between threads
    as long as the coefficient callables are pure.
    """

    state_dim: int
    noise_dim: int
    horizon: float
    controls: tuple
    drift: Coefficient
    diffusion: Coefficient
    running_cost: Coefficient
    terminal_cost: TerminalCost
    declared_bounds: Bounds | None = None
    name: str = "custom"

    def __post_init__(self):
        if int(self.state_dim) < 1 or int(self.noise_dim) < 1:
            raise ProblemError("state_dim and noise_dim must be positive")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise ProblemError(f"horizon must be positive and finite, got {self.horizon}")
        pts = tuple(tuple(float(c) for c in np.atleast_1d(a)) for a in self.controls)
        if not pts:
            raise ProblemError("control set is empty")
        if len(set(pts)) != len(pts):
            raise ProblemError("control set contains duplicates")
        if len({len(a) for a in pts}) != 1:
            raise ProblemError("control points must share one dimension")
        object.__setattr__(self, "controls", pts)
        object.__setattr__(self, "_control_arrays", tuple(np.array(a) for a in pts))

    @property
    def n_controls(self) -> int:
        return len(self.controls)

    def control(self, a: int) -> np.ndarray:
        if not 0 <= a < len(self.controls):
            raise ProblemError(f"control index {a} out of range [0, {len(self.controls)})")
        return self._control_arrays[a]

    # Broadcasting wrappers.  ``x`` has shape (..., d).

    def b(self, t: float, x: np.ndarray, a: int) -> np.ndarray:
        out = np.asarray(self.drift(t, x, self.control(a)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.state_dim,))

    def sigma(self, t: float, x: np.ndarray, a: int) -> np.ndarray:
        out = np.asarray(self.diffusion(t, x, self.control(a)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1] + (self.state_dim, self.noise_dim))

    def f(self, t: float, x: np.ndarray, a: int) -> np.ndarray:
        out = np.asarray(self.running_cost(t, x, self.control(a)), dtype=float)
        return np.broadcast_to(out, x.shape[:-1])

    def g(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.terminal_cost(x), dtype=float)
        return np.broadcast_to(out, x.shape[:-1])

    def with_coefficients(self, drift: Coefficient, diffusion: Coefficient,
                          name: str | None = None) -> "ControlProblem":
        return ControlProblem(
            state_dim=self.state_dim, noise_dim=self.noise_dim, horizon=self.horizon,
            controls=self.controls, drift=drift, diffusion=diffusion,
            running_cost=self.running_cost, terminal_cost=self.terminal_cost,
            declared_bounds=self.declared_bounds, name=name or self.name,
        )


def eval_coeffs(problem: ControlProblem, t: float, x, a: int):
    """Return ``(drift, diffusion, running cost)`` at a single point.

    Raises
    ------
    ProblemError
        If ``t`` lies outside ``[0, T]``, the control index is invalid or any
        coefficient evaluates to a non-finite value.
    """
    if not 0.0 <= t <= problem.horizon:
        raise ProblemError(f"time {t} outside [0, {problem.horizon}]")
    x = np.asarray(x, dtype=float).reshape(problem.state_dim)
    drift = np.array(problem.b(t, x, a))
    diff = np.array(problem.sigma(t, x, a))
    cost = float(problem.f(t, x, a))
    for label, val in (("drift", drift), ("diffusion", diff), ("running cost", cost)):
        if not np.all(np.isfinite(val)):
            raise ProblemError(f"non-finite {label} at t={t}, x={x.tolist()}, control {a}")
    return drift, diff, cost


# ---------------------------------------------------------------------------
# Benchmarks

_DEFAULTS = {
    "constant_coeff": {"b": 1.0, "sigma": 1.0, "f": 0.0, "T": 1.0},
    "sine_heat": {"sigma": 1.0, "T": 1.0},
    "uncertain_vol_quadratic": {"sigma_min": 0.1, "sigma_max": 0.2, "T": 1.0, "geometric": 0.0},
    "uncertain_vol_butterfly": {"sigma_min": 0.1, "sigma_max": 0.3, "T": 1.0, "geometric": 0.0,
                                "center": 0.0, "width": 0.5},
    "deterministic_drift": {"T": 1.0},
}

BENCHMARK_NAMES = tuple(_DEFAULTS)


@dataclass(frozen=True)
class BenchmarkSpec:
    """A named benchmark plus parameter overrides (missing keys take defaults)."""

    name: str
    parameters: Mapping[str, float] = field(default_factory=dict)

    def resolved(self) -> dict:
        if self.name not in _DEFAULTS:
            raise ProblemError(f"unknown benchmark {self.name!r}; expected one of {BENCHMARK_NAMES}")
        unknown = set(self.parameters) - set(_DEFAULTS[self.name])
        if unknown:
            raise ProblemError(f"unknown parameters for {self.name}: {sorted(unknown)}")
        params = dict(_DEFAULTS[self.name])
        params.update({k: float(v) for k, v in self.parameters.items()})
        _validate_parameters(self.name, params)
        return params


def _validate_parameters(name, p):
    if not p["T"] > 0:
        raise ProblemError("T must be positive")
    if "sigma" in p and p["sigma"] < 0:
        raise ProblemError("sigma must be nonnegative")
    if name.startswith("uncertain_vol"):
        if not 0 <= p["sigma_min"] < p["sigma_max"]:
            raise ProblemError("need 0 <= sigma_min < sigma_max")
        if p["geometric"] not in (0.0, 1.0):
            raise ProblemError("geometric must be 0 or 1")
    if name == "uncertain_vol_butterfly" and not p["width"] > 0:
        raise ProblemError("butterfly width must be positive")
    for k, v in p.items():
        if not math.isfinite(v):
            raise ProblemError(f"parameter {k} is not finite")


def _zero(t, x, a):
    return 0.0


def _sine(x):
    return np.sin(x[..., 0])


def _square(x):
    return x[..., 0] ** 2


def butterfly_payoff(x, center=0.0, width=0.5):
    """Long-short-long call spread; bounded, Lipschitz, kinked at three strikes."""
    z = np.asarray(x, dtype=float) - center
    return np.maximum(z + width, 0.0) - 2.0 * np.maximum(z, 0.0) + np.maximum(z - width, 0.0)


def _vol_diffusion(geometric: bool):
    if geometric:
        return lambda t, x, a: a[0] * x[..., None]
    return lambda t, x, a: a[0]


def make_benchmark(spec: BenchmarkSpec) -> ControlProblem:
    p = spec.resolved()
    T = p["T"]
    if spec.name == "constant_coeff":
        b, s, f = p["b"], p["sigma"], p["f"]
        return ControlProblem(
            1, 1, T, [[0.0]],
            drift=lambda t, x, a: b, diffusion=lambda t, x, a: s,
            running_cost=lambda t, x, a: f, terminal_cost=_sine,
            declared_bounds=Bounds(C0=max(abs(b), abs(s)), C1=max(1.0, abs(f))),
            name=spec.name)
    if spec.name == "sine_heat":
        s = p["sigma"]
        return ControlProblem(
            1, 1, T, [[s]],
            drift=_zero, diffusion=lambda t, x, a: a[0],
            running_cost=_zero, terminal_cost=_sine,
            declared_bounds=Bounds(C0=s, C1=1.0), name=spec.name)
    if spec.name in ("uncertain_vol_quadratic", "uncertain_vol_butterfly"):
        geometric = p["geometric"] == 1.0
        if spec.name.endswith("quadratic"):
            g = _square
        else:
            c, w = p["center"], p["width"]
            g = lambda x: butterfly_payoff(x[..., 0], c, w)  # noqa: E731
        return ControlProblem(
            1, 1, T, [[p["sigma_min"]], [p["sigma_max"]]],
            drift=_zero, diffusion=_vol_diffusion(geometric),
            running_cost=_zero, terminal_cost=g, name=spec.name)
    if spec.name == "deterministic_drift":
        return ControlProblem(
            1, 1, T, [[-1.0], [1.0]],
            drift=lambda t, x, a: a[0], diffusion=_zero,
            running_cost=_zero, terminal_cost=lambda x: np.abs(x[..., 0]),
            declared_bounds=Bounds(C0=1.0, C1=1.0), name=spec.name)
    raise ProblemError(f"unknown benchmark {spec.name!r}")  # pragma: no cover


def closed_form_value(spec: BenchmarkSpec, t: float, x):
    """Exact value ``v(t, x)`` for benchmarks that have one.

    ``x`` may be a scalar or an array of 1-D states; the result has the same
    shape.
    """
    p = spec.resolved()
    tau = p["T"] - t
    if tau < 0:
        raise ProblemError(f"time {t} beyond horizon {p['T']}")
    x = np.asarray(x, dtype=float)
    if spec.name == "sine_heat":
        return np.exp(-0.5 * p["sigma"] ** 2 * tau) * np.sin(x)
    if spec.name == "constant_coeff":
        return np.exp(-0.5 * p["sigma"] ** 2 * tau) * np.sin(x + p["b"] * tau) + p["f"] * tau
    if spec.name == "uncertain_vol_quadratic":
        s = p["sigma_max"]
        if p["geometric"] == 1.0:
            return x ** 2 * np.exp(s ** 2 * tau)
        return x ** 2 + s ** 2 * tau
    if spec.name == "deterministic_drift":
        return np.abs(x) + tau
    raise NoClosedForm(f"{spec.name} has no closed form; use a fine-grid reference")


# ---------------------------------------------------------------------------
# Empirical regularity constants

@dataclass(frozen=True)
class LipschitzEstimate:
    """Sampled sup-norms and moduli per coefficient.

    Keys are ``drift``, ``diffusion``, ``running_cost`` and (space only)
    ``terminal_cost``.  The time modulus is the Hölder-1/2 quotient.
    """

    sup_norms: dict
    space_lipschitz: dict
    time_holder: dict

    @property
    def C0(self) -> float:
        keys = ("drift", "diffusion")
        return max(max(d[k] for k in keys)
                   for d in (self.sup_norms, self.space_lipschitz, self.time_holder))

    @property
    def C1(self) -> float:
        vals = [self.sup_norms["running_cost"], self.space_lipschitz["running_cost"],
                self.time_holder["running_cost"], self.space_lipschitz["terminal_cost"]]
        return max(vals)

    def check(self, bounds: Bounds, rtol: float = 1e-9) -> None:
        """Raise if the sampled magnitudes exceed declared bounds."""
        if self.C0 > bounds.C0 * (1 + rtol) + rtol:
            raise ProblemError(f"sampled C0 {self.C0:.6g} exceeds declared {bounds.C0}")
        if self.C1 > bounds.C1 * (1 + rtol) + rtol:
            raise ProblemError(f"sampled C1 {self.C1:.6g} exceeds declared {bounds.C1}")


def _norm(v):
    v = np.asarray(v)
    if v.ndim == 1:
        return np.abs(v)
    return np.sqrt(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1))


def estimate_lipschitz(problem: ControlProblem, box, sample_count: int,
                       seed: int = 0) -> LipschitzEstimate:
    """Estimate sup-norms, space-Lipschitz and time-Hölder-1/2 constants.

    Half of the point pairs are independent uniform draws in the box, the
    other half are local perturbations at log-uniform scales so that the
    difference quotients see small separations.
    """
    if sample_count < 2:
        raise ProblemError("sample_count must be at least 2")
    lower, upper = (np.asarray(v, dtype=float).reshape(problem.state_dim) for v in box)
    if np.any(~(upper > lower)):
        raise ProblemError("degenerate domain box")
    rng = np.random.default_rng(seed)
    n, d, T = sample_count, problem.state_dim, problem.horizon
    width = upper - lower

    x = lower + width * rng.random((n, d))
    far = lower + width * rng.random((n, d))
    step = rng.standard_normal((n, d))
    step *= (10.0 ** rng.uniform(-4, 0, n))[:, None] * width / np.linalg.norm(step, axis=1)[:, None]
    y = np.where((np.arange(n) % 2 == 0)[:, None], far, np.clip(x + step, lower, upper))
    dx = np.linalg.norm(x - y, axis=1)
    keep = dx > 0

    t = T * rng.random(n)
    s = T * rng.random(n)
    local = np.clip(t + T * 10.0 ** rng.uniform(-6, 0, n) * rng.choice([-1, 1], n), 0, T)
    s = np.where(np.arange(n) % 3 == 0, s, np.where(np.arange(n) % 3 == 1, local, 0.0))
    dt = np.abs(t - s)
    tkeep = dt > 0

    sup = {"drift": 0.0, "diffusion": 0.0, "running_cost": 0.0}
    lip = {"drift": 0.0, "diffusion": 0.0, "running_cost": 0.0, "terminal_cost": 0.0}
    hol = {"drift": 0.0, "diffusion": 0.0, "running_cost": 0.0}
    evaluators = {"drift": problem.b, "diffusion": problem.sigma, "running_cost": problem.f}

    gx, gy = problem.g(x), problem.g(y)
    if np.any(keep):
        lip["terminal_cost"] = float(np.max(np.abs(gx - gy)[keep] / dx[keep]))

    for a in range(problem.n_controls):
        for key, ev in evaluators.items():
            # t is scalar in the coefficient API, so evaluate point by point.
            vx = np.stack([ev(t[i], x[i:i + 1], a)[0] for i in range(n)])
            vy = np.stack([ev(t[i], y[i:i + 1], a)[0] for i in range(n)])
            vs = np.stack([ev(s[i], x[i:i + 1], a)[0] for i in range(n)])
            if not (np.all(np.isfinite(vx)) and np.all(np.isfinite(vy)) and np.all(np.isfinite(vs))):
                raise ProblemError(f"non-finite {key} sampled for control {a}")
            sup[key] = max(sup[key], float(np.max(_norm(vx))))
            if np.any(keep):
                lip[key] = max(lip[key], float(np.max(_norm(vx - vy)[keep] / dx[keep])))
            if np.any(tkeep):
                hol[key] = max(hol[key], float(np.max(_norm(vx - vs)[tkeep] / np.sqrt(dt[tkeep]))))
    return LipschitzEstimate(sup, lip, hol)
