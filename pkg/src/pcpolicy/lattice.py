"""Uniform rectangular grids, value/policy fields and multilinear interpolation.

Interpolation clamps query points to the grid box (constant extrapolation),
so weights are always a convex combination of nodal values.  That keeps
every scheme built on it monotone and bounded by the data.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Tensor grid ``lower + i * spacing``, ``i = 0 .. counts - 1`` per axis."""

    lower: np.ndarray
    upper: np.ndarray
    spacing: np.ndarray
    counts: tuple

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def size(self) -> int:
        return int(np.prod(self.counts))

    def axes(self) -> list[np.ndarray]:
        return [self.lower[k] + self.spacing[k] * np.arange(self.counts[k]) for k in range(self.dim)]

    def nodes(self) -> np.ndarray:
        """All nodes as an array of shape ``(size, d)`` in C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def same_as(self, other: "SpatialGrid") -> bool:
        return (self.counts == other.counts
                and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.spacing, other.spacing))

    def interior_mask(self, box=None, trim: float = 0.0) -> np.ndarray:
        """Boolean node mask for a sub-box, or for the box shrunk by ``trim`` per side."""
        pts = self.nodes()
        if box is None:
            width = self.upper - self.lower
            lo, hi = self.lower + trim * width, self.upper - trim * width
        else:
            lo, hi = (np.asarray(v, dtype=float).reshape(self.dim) for v in box)
        tol = 1e-12 * np.maximum(1.0, np.abs(self.upper - self.lower))
        mask = np.all((pts >= lo - tol) & (pts <= hi + tol), axis=1)
        return mask.reshape(self.counts)


def build_grid(bounds, spacing) -> SpatialGrid:
    """Uniform grid over ``bounds = (lower, upper)``.

    The lower corner and spacing are kept exactly; when the box length is not a
    multiple of the spacing the upper bound is pushed out to the next node.

    >>> build_grid(([-1.0], [1.0]), 0.5).axes()[0].tolist()
    [-1.0, -0.5, 0.0, 0.5, 1.0]
    """
    lower = np.atleast_1d(np.asarray(bounds[0], dtype=float))
    upper = np.atleast_1d(np.asarray(bounds[1], dtype=float))
    if lower.shape != upper.shape or lower.ndim != 1:
        raise GridError("lower and upper bounds must be 1-D and of equal length")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=float), lower.shape).copy()
    if not np.all(np.isfinite(lower)) or not np.all(np.isfinite(upper)):
        raise GridError("bounds must be finite")
    if np.any(~(spacing > 0)) or not np.all(np.isfinite(spacing)):
        raise GridError(f"spacing must be positive, got {spacing.tolist()}")
    if np.any(~(upper > lower)):
        raise GridError("upper bound must exceed lower bound on every axis")
    cells = (upper - lower) / spacing
    counts = []
    for c in cells:
        r = round(c)
        n = r if abs(c - r) <= 1e-9 * max(1.0, c) else math.ceil(c)
        counts.append(int(n) + 1)
    top = lower + spacing * (np.array(counts) - 1)
    return SpatialGrid(lower, top, spacing, tuple(counts))


@dataclass(frozen=True, eq=False)
class ValueField:
    grid: SpatialGrid
    values: np.ndarray
    time_label: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float).reshape(self.grid.counts)
        if not np.all(np.isfinite(vals)):
            raise GridError(f"non-finite values in field at t={self.time_label}")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True, eq=False)
class PolicyField:
    grid: SpatialGrid
    indices: np.ndarray
    time_label: float

    def __post_init__(self):
        object.__setattr__(self, "indices",
                           np.asarray(self.indices, dtype=np.int64).reshape(self.grid.counts))

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Control index at the nearest node (points clamped to the box)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        g = self.grid
        idx = np.rint((np.clip(pts, g.lower, g.upper) - g.lower) / g.spacing).astype(np.int64)
        idx = np.clip(idx, 0, np.array(g.counts) - 1)
        return self.indices[tuple(idx.T)]


@dataclass
class ValueSurface:
    """Time levels in increasing order; the last level sits at the horizon."""

    times: list = field(default_factory=list)
    fields: list = field(default_factory=list)
    policies: list = field(default_factory=list)

    def add(self, value: ValueField, policy: PolicyField | None = None):
        self.times.append(value.time_label)
        self.fields.append(value)
        self.policies.append(policy)

    def ordered(self) -> "ValueSurface":
        order = np.argsort(self.times, kind="stable")
        return ValueSurface([self.times[i] for i in order], [self.fields[i] for i in order],
                            [self.policies[i] for i in order])

    @property
    def grid(self) -> SpatialGrid:
        return self.fields[0].grid

    @property
    def initial(self) -> ValueField:
        return self.fields[0]

    def level(self, t: float, tol: float = 1e-9) -> int:
        for k, s in enumerate(self.times):
            if abs(s - t) <= tol * max(1.0, abs(t)):
                return k
        raise GridError(f"no level at time {t}")

    def at(self, t: float) -> ValueField:
        return self.fields[self.level(t)]

    def __len__(self):
        return len(self.times)

    def evaluate(self, t, x) -> np.ndarray:
        """Space-time evaluation: linear in time between levels, multilinear in space.

        Times before the first level use the first level (constant extension).
        """
        t = float(t)
        times = np.asarray(self.times)
        if t > times[-1] + 1e-12:
            raise GridError(f"time {t} beyond last level {times[-1]}")
        if t <= times[0]:
            return interpolate_many(self.fields[0], x)
        k = int(np.searchsorted(times, t, side="right")) - 1
        k = min(k, len(times) - 2)
        w = (t - times[k]) / (times[k + 1] - times[k])
        lo, hi = interpolate_many(self.fields[k], x), interpolate_many(self.fields[k + 1], x)
        return (1.0 - w) * lo + w * hi


def _snap(s: np.ndarray) -> np.ndarray:
    # Node coordinates recomputed in floating point can land a hair off the
    # integer index; snapping keeps node lookups bitwise exact.
    r = np.rint(s)
    return np.where(np.abs(s - r) <= 1e-12 * np.maximum(1.0, np.abs(s)), r, s)


def interpolation_stencil(grid: SpatialGrid, points: np.ndarray):
    """Corner indices and weights of the clamped multilinear interpolant.

    Returns ``(index_tuples, weights)`` where ``weights`` has shape
    ``(2**d, n)`` and each column is a partition of unity.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if not np.all(np.isfinite(pts)):
        raise GridError("non-finite interpolation point")
    s = (np.clip(pts, grid.lower, grid.upper) - grid.lower) / grid.spacing
    s = _snap(s)
    counts = np.array(grid.counts)
    base = np.clip(np.floor(s).astype(np.int64), 0, counts - 2)
    frac = np.clip(s - base, 0.0, 1.0)
    corners, weights = [], []
    for offs in itertools.product((0, 1), repeat=grid.dim):
        offs = np.array(offs)
        w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
        corners.append(tuple((base + offs).T))
        weights.append(w)
    return corners, np.array(weights)


def interpolate_many(field: ValueField, points) -> np.ndarray:
    """Vectorised ``interpolate`` over ``points`` of shape ``(n, d)``."""
    corners, weights = interpolation_stencil(field.grid, points)
    out = np.zeros(weights.shape[1])
    for idx, w in zip(corners, weights):
        out += w * field.values[idx]
    return out


def interpolate(field: ValueField, point) -> float:
    return float(interpolate_many(field, np.reshape(point, (1, field.grid.dim)))[0])


def sample_field(function: Callable[[np.ndarray], np.ndarray], grid: SpatialGrid,
                 time_label: float) -> ValueField:
    """Evaluate ``function`` on all nodes; it receives an ``(n, d)`` array."""
    vals = np.asarray(function(grid.nodes()), dtype=float)
    vals = np.broadcast_to(vals, (grid.size,))
    if not np.all(np.isfinite(vals)):
        raise GridError("non-finite sample")
    return ValueField(grid, vals.reshape(grid.counts).copy(), time_label)


def sup_diff(a: ValueField, b: ValueField, box=None, trim: float = 0.0) -> float:
    """Max nodal ``|a - b|``, optionally over an interior sub-box only."""
    if not a.grid.same_as(b.grid):
        raise GridError("fields live on different grids")
    diff = np.abs(a.values - b.values)
    if box is not None or trim > 0:
        mask = a.grid.interior_mask(box, trim)
        if not mask.any():
            raise GridError("interior box contains no nodes")
        diff = diff[mask]
    return float(np.max(diff))


# ---------------------------------------------------------------------------
# CSV dumps

def _coord_header(d):
    return [f"x_{k + 1}" for k in range(d)]


def write_field_csv(field: ValueField, path) -> None:
    nodes = field.grid.nodes()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_coord_header(field.grid.dim) + ["value"])
        for p, v in zip(nodes, field.values.ravel()):
            w.writerow([repr(float(c)) for c in p] + [repr(float(v))])


def write_policy_csv(policy: PolicyField, path) -> None:
    nodes = policy.grid.nodes()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_coord_header(policy.grid.dim) + ["control"])
        for p, c in zip(nodes, policy.indices.ravel()):
            w.writerow([repr(float(v)) for v in p] + [int(c)])


def read_field_csv(path, grid: SpatialGrid, time_label: float) -> ValueField:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    vals = np.array([float(r[-1]) for r in rows[1:]])
    return ValueField(grid, vals, time_label)


def write_surface(surface: ValueSurface, directory, with_policy: bool = True) -> list[Path]:
    """One CSV per level named by its time label (plus policy files when present)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for t, fld, pol in zip(surface.times, surface.fields, surface.policies):
        p = out / f"value_t{t:.10f}.csv"
        write_field_csv(fld, p)
        written.append(p)
        if with_policy and pol is not None:
            q = out / f"policy_t{t:.10f}.csv"
            write_policy_csv(pol, q)
            written.append(q)
    return written
