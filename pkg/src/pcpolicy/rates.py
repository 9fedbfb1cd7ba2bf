"""Refinement studies and exact exponent bookkeeping for error bounds.

``optimize_rate`` works on bounds of the form ``sum_i C h^(p_i a + q_i)``
where the auxiliary parameter (mollification radius, number of policy
intervals, ...) is tied to the step as ``h^a``.  The achievable order is
``max_{a >= 0} min_i (p_i a + q_i)``; everything is done in exact rationals.
"""

from __future__ import annotations

import csv
import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .lattice import build_grid, interpolate_many, sample_field, sup_diff
from .model import BenchmarkSpec, closed_form_value, make_benchmark
from .sl import SchemeConfig, pcp_solve, sl_solve


class RateError(ValueError):
    pass


class Order(enum.Enum):
    """Distinguished fit outcome: the errors sit at or below the noise floor."""

    PERFECT_MATCH = "perfect-match"

    def __str__(self):
        return self.value


PERFECT_MATCH = Order.PERFECT_MATCH


@dataclass
class RateRow:
    h: float
    error: float
    meta: dict = field(default_factory=dict)


@dataclass
class RateTable:
    rows: list = field(default_factory=list)
    fitted_slope: float | Order | None = None
    label: str = "error"

    @property
    def hs(self) -> np.ndarray:
        return np.array([r.h for r in self.rows])

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.rows])

    def validate(self):
        hs = self.hs
        if np.any(np.diff(hs) >= 0):
            raise RateError("h must be strictly decreasing")
        if not np.all(np.isfinite(self.errors)):
            raise RateError("errors must be finite")

    def local_slopes(self) -> list:
        out = [None]
        for a, b in zip(self.rows, self.rows[1:]):
            if a.error > 0 and b.error > 0:
                out.append(math.log(a.error / b.error) / math.log(a.h / b.h))
            else:
                out.append(None)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["h", self.label, "slope_local"])
            for row, s in zip(self.rows, self.local_slopes()):
                w.writerow([repr(row.h), repr(row.error), "" if s is None else repr(s)])
            slope = self.fitted_slope
            fh.write(f"# fitted_slope={slope if isinstance(slope, Order) or slope is None else repr(slope)}\n")


def estimate_order(table: RateTable, floor: float = 0.0):
    """Least-squares slope of ``log(error)`` against ``log(h)``.

    Returns ``PERFECT_MATCH`` when some error is exactly zero or every error
    is at most ``floor``.
    """
    if len(table.rows) < 3:
        raise RateError("need at least three rows to fit an order")
    table.validate()
    errs = table.errors
    if np.any(errs < 0):
        raise RateError("errors must be nonnegative")
    if np.any(errs == 0) or np.all(errs <= floor):
        return PERFECT_MATCH
    slope, _ = np.polyfit(np.log(table.hs), np.log(errs), 1)
    return float(slope)


# ---------------------------------------------------------------------------
# Exponent optimisation

@dataclass(frozen=True)
class RateTerm:
    """Bound term ``h^(slope * a + constant)``."""

    slope: Fraction
    constant: Fraction

    def __post_init__(self):
        object.__setattr__(self, "slope", Fraction(self.slope))
        object.__setattr__(self, "constant", Fraction(self.constant))

    def exponent(self, a: Fraction) -> Fraction:
        return self.slope * a + self.constant


@dataclass(frozen=True)
class RateOptimum:
    a_star: Fraction | None
    rate: Fraction | None
    boundary: bool = False

    def __str__(self):
        return f"a*={self.a_star} rate={self.rate}"


def parse_terms(text: str) -> list:
    """Parse ``"p,q;p,q;..."`` with rational entries such as ``1/2``."""
    terms = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [c.strip() for c in chunk.split(",")]
        if len(parts) != 2:
            raise RateError(f"term {chunk!r} must be 'slope,constant'")
        try:
            terms.append(RateTerm(Fraction(parts[0]), Fraction(parts[1])))
        except (ValueError, ZeroDivisionError) as exc:
            raise RateError(f"bad rational in {chunk!r}") from exc
    return terms


def optimize_rate(terms: Sequence[RateTerm]) -> RateOptimum:
    """Exact ``argmax_{a >= 0} min_i (p_i a + q_i)``.

    The objective is concave and piecewise linear, so the maximum sits at
    ``a = 0`` or where two terms cross.  Among maximisers the smallest ``a``
    is returned.  If every slope is positive the objective is unbounded and
    ``a_star``/``rate`` are ``None``; an optimum at ``a = 0`` or with no
    decreasing term is flagged ``boundary``.
    """
    terms = list(terms)
    if not terms:
        raise RateError("no terms")
    if all(t.slope > 0 for t in terms):
        return RateOptimum(None, None, boundary=True)

    def objective(a):
        return min(t.exponent(a) for t in terms)

    candidates = {Fraction(0)}
    for i, u in enumerate(terms):
        for v in terms[i + 1:]:
            if u.slope != v.slope:
                a = (v.constant - u.constant) / (u.slope - v.slope)
                if a >= 0:
                    candidates.add(a)
    best = max(objective(a) for a in candidates)
    a_star = min(a for a in candidates if objective(a) == best)
    has_pos = any(t.slope > 0 for t in terms)
    has_neg = any(t.slope < 0 for t in terms)
    return RateOptimum(a_star, best, boundary=(a_star == 0 or not (has_pos and has_neg)))


# Exponent bookkeeping of the known bounds.  Two Ito expansions for piecewise
# constant policies: eps + h^(1/2) + eps^-3 h with eps = h^a.
BOUND_TERMS = {
    "pcp_second_order": [RateTerm(1, 0), RateTerm(0, Fraction(1, 2)), RateTerm(-3, 1)],
    "pcp_first_order": [RateTerm(1, 0), RateTerm(-2, Fraction(1, 2)), RateTerm(-3, 1)],
    # n delta^c + n^(-1/4) with n = delta^-a, for consistency order c.
    "scheme_half_consistency": [RateTerm(-1, Fraction(1, 3)), RateTerm(Fraction(1, 4), 0)],
    "scheme_first_consistency": [RateTerm(-1, Fraction(1, 2)), RateTerm(Fraction(1, 4), 0)],
}


# ---------------------------------------------------------------------------
# Error ladders

@dataclass(frozen=True)
class LadderConfig:
    """Grid coupling and measurement settings for ``error_ladder``.

    ``coupling`` is ``"linear"`` (dx = scale * h) or ``"sqrt"``
    (dx = scale * sqrt(h)).  With ``substep`` set, the ladder varies the
    policy interval over ``h_list`` while every solve uses that fixed time
    step.
    """

    domain: tuple = (-2 * math.pi, 2 * math.pi)
    interior: tuple = (-math.pi, math.pi)
    coupling: str = "linear"
    scale: float = 1.0
    substeps: int = 1
    substep: float | None = None
    perfect_floor: float = 1e-8
    workers: int = 1

    def spacing(self, h: float) -> float:
        if self.coupling == "linear":
            return self.scale * h
        if self.coupling == "sqrt":
            return self.scale * math.sqrt(h)
        raise RateError(f"unknown grid coupling {self.coupling!r}")


def _scheme(h_rung: float, cfg: LadderConfig):
    """Time step and substep count for one rung."""
    if cfg.substep is None:
        return h_rung, cfg.substeps
    m = h_rung / cfg.substep
    if abs(m - round(m)) > 1e-9 * max(1.0, m):
        raise RateError(f"policy interval {h_rung} is not a multiple of substep {cfg.substep}")
    return cfg.substep, int(round(m))


def _solve(problem, solver, h, m, grid, workers):
    config = SchemeConfig(h, grid, m, workers)
    if solver == "sl":
        if m != 1:
            raise RateError("the sl solver maximises every step; use pcp for policy intervals")
        return sl_solve(problem, config)
    if solver == "pcp":
        return pcp_solve(problem, config)
    raise RateError(f"unknown solver {solver!r}")


def error_ladder(spec: BenchmarkSpec, solver: str, h_list: Sequence[float], reference: str,
                 config: LadderConfig = LadderConfig()) -> RateTable:
    """Interior-box sup error at ``t = 0`` for each rung of ``h_list``.

    ``reference="closed_form"`` compares with the exact value.
    ``reference="fine_grid"`` compares with the same solver family at
    ``min(h_list) / 4``; in that case the table is labelled
    ``self_convergence`` and, for ``pcp`` with a fixed substep, the reference
    is the plain scheme (maximisation every substep) on the same lattice and
    errors are signed gaps ``reference - computed``.  A failing rung
    ends the table early with ``meta["failed"]`` set.
    """
    h_list = [float(h) for h in h_list]
    if len(h_list) < 3 or any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise RateError("h_list must be strictly decreasing with at least three entries")
    problem = make_benchmark(spec)
    fixed_lattice = config.substep is not None

    def grid_for(h):
        step = config.substep if fixed_lattice else h
        return build_grid(([config.domain[0]], [config.domain[1]]), config.spacing(step))

    ref_values = None
    if reference == "closed_form":
        closed_form_value(spec, 0.0, 0.0)  # raises NoClosedForm early
    elif reference == "fine_grid":
        if fixed_lattice:
            h_ref = config.substep
            ref = _solve(problem, "sl", h_ref, 1, grid_for(h_ref), config.workers)
        else:
            h_ref = min(h_list) / 4
            ref = _solve(problem, solver, h_ref, config.substeps, grid_for(h_ref), config.workers)
        ref_values = ref.initial
        if not fixed_lattice and h_ref >= min(h_list):
            raise RateError("reference must be finer than every rung")
    else:
        raise RateError(f"unknown reference {reference!r}")

    def rung(h):
        step, m = _scheme(h, config)
        grid = grid_for(h)
        meta = {"solver": solver, "time_step": step, "substeps": m, "dx": float(grid.spacing[0]),
                "domain": list(config.domain), "interior": list(config.interior),
                "reference": reference}
        try:
            surface = _solve(problem, solver, step, m, grid, 1)
        except Exception as exc:  # reported in the table, not raised
            meta["failed"] = f"{type(exc).__name__}: {exc}"
            return RateRow(h, math.nan, meta)
        v0 = surface.initial
        box = ([config.interior[0]], [config.interior[1]])
        if reference == "closed_form":
            exact = sample_field(lambda x: closed_form_value(spec, 0.0, x[:, 0]), grid, 0.0)
            return RateRow(h, sup_diff(v0, exact, box=box), meta)
        if fixed_lattice:
            mask = grid.interior_mask(box)
            full = ref_values.values - v0.values
            gap = full[mask]
            meta["min_gap"] = float(gap.min())
            meta["min_gap_grid"] = float(full.min())
            return RateRow(h, float(gap.max()), meta)
        coarse = sample_field(lambda x: interpolate_many(ref_values, x), grid, 0.0)
        return RateRow(h, sup_diff(v0, coarse, box=box), meta)

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            rows = list(pool.map(rung, h_list))
    else:
        rows = [rung(h) for h in h_list]
    done = []
    for row in rows:
        done.append(row)
        if "failed" in row.meta:
            break
    label = "error" if reference == "closed_form" else "self_convergence"
    table = RateTable(done, None, label)
    if len(done) == len(h_list) and np.all(np.isfinite(table.errors)):
        errs = table.errors
        if np.all(errs <= config.perfect_floor):
            table.fitted_slope = PERFECT_MATCH
        elif np.all(errs > 0):
            table.fitted_slope = estimate_order(table)
    return table


def envelope_constant(table: RateTable, order: float) -> float:
    """``C`` such that the coarsest rung sits exactly on ``C h^order``."""
    first = table.rows[0]
    return first.error / first.h ** order


def under_envelope(table: RateTable, order: float, slack: float = 1e-12) -> bool:
    c = envelope_constant(table, order)
    return all(r.error <= c * r.h ** order + slack for r in table.rows)
