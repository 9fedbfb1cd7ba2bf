"""Space-time mollification by a scaled bump kernel.

The kernel is ``rho(s, y) = psi_t(s) * psi_x(y)`` with ``psi_t`` a normalised
C-infinity bump on ``(0, 1)`` and ``psi_x`` a radial bump on the unit ball.
Scaled to ``eps`` it is supported on ``(0, eps^2) x {|y| < eps}``, so the
mollified value at time ``t`` only looks backwards in time.

Convolutions use the midpoint rule on a tensor grid over the support.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import integrate, special

from .lattice import ValueSurface


class MollifierError(ValueError):
    pass


def _bump_time(s):
    s = np.asarray(s, dtype=float)
    inside = (s > 0) & (s < 1)
    q = np.where(inside, s * (1 - s), 1.0)
    return np.where(inside, np.exp(-1.0 / q), 0.0)


def _bump_space(r2):
    r2 = np.asarray(r2, dtype=float)
    inside = r2 < 1
    q = np.where(inside, 1 - r2, 1.0)
    return np.where(inside, np.exp(-1.0 / q), 0.0)


def _normalisers(dim: int):
    zt = integrate.quad(lambda s: float(_bump_time(s)), 0, 1, epsabs=0, epsrel=1e-13, limit=200)[0]
    shell = 2 * math.pi ** (dim / 2) / special.gamma(dim / 2)
    zr = integrate.quad(lambda r: r ** (dim - 1) * float(_bump_space(r * r)), 0, 1,
                        epsabs=0, epsrel=1e-13, limit=200)[0]
    return zt, shell * zr


@dataclass(frozen=True)
class Mollifier:
    """Kernel ``eps^-(d+2) rho(t / eps^2, x / eps)``.

    ``cells`` is the number of quadrature cells per ``eps`` in space and per
    ``eps^2`` in time (spacing ``eps / cells``).
    """

    epsilon: float
    dim: int = 1
    cells: int = 32

    def __post_init__(self):
        if not self.epsilon > 0:
            raise MollifierError("epsilon must be positive")
        if self.dim < 1 or self.cells < 1:
            raise MollifierError("dim and cells must be positive")

    @cached_property
    def _norm(self):
        return _normalisers(self.dim)

    def rho(self, s, y) -> np.ndarray:
        """Unscaled kernel; ``y`` has shape ``(..., d)``."""
        zt, zx = self._norm
        y = np.asarray(y, dtype=float)
        return _bump_time(s) * _bump_space(np.sum(y * y, axis=-1)) / (zt * zx)

    @cached_property
    def nodes(self):
        """Quadrature nodes ``(s_i, y_j)`` and weights with nonzero kernel mass.

        Returns ``(times, offsets, weights)`` with ``weights`` of shape
        ``(len(times), len(offsets))``.
        """
        eps, n, d = self.epsilon, self.cells, self.dim
        s = (np.arange(n) + 0.5) / n
        ax = -1 + (np.arange(2 * n) + 0.5) / n
        y = np.array(list(itertools.product(ax, repeat=d)))
        y = y[np.sum(y * y, axis=1) < 1]
        w = self.rho(s[:, None], y[None, :, :]) * (1.0 / n) * (1.0 / n) ** d
        keep = np.any(w > 0, axis=0)
        return s * eps ** 2, y[keep] * eps, w[:, keep]


def kernel_value(m: Mollifier, t, x) -> np.ndarray:
    """``rho_eps(t, x)``; ``x`` has shape ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    return m.rho(np.asarray(t) / m.epsilon ** 2, x / m.epsilon) / m.epsilon ** (m.dim + 2)


def kernel_mass(m: Mollifier) -> float:
    return math.fsum(m.nodes[2].ravel())


Evaluable = Callable[[float, np.ndarray], np.ndarray]


def _as_evaluable(phi, dim):
    """Normalise the input to ``(t, x[n, d]) -> values[n]`` and its time limit."""
    if isinstance(phi, ValueSurface):
        if phi.grid.dim != dim:
            raise MollifierError("surface dimension does not match the mollifier")
        t0, t_end = phi.times[0], phi.times[-1]
        return (lambda t, x: phi.evaluate(max(t, t0), x)), t_end
    return (lambda t, x: np.asarray(phi(max(t, 0.0), x), dtype=float)), math.inf


def mollify_surface(phi, m: Mollifier) -> Callable[[float, np.ndarray], np.ndarray]:
    """Return ``(t, x) -> (phi * rho_eps)(t, x)``.

    ``phi`` is a ``ValueSurface`` or a callable ``phi(t, x)`` taking ``x`` of
    shape ``(n, d)``.  Times before the start of the data use the initial
    slice (constant extension); surfaces are clamped in space by their
    interpolant.
    """
    evaluate, t_end = _as_evaluable(phi, m.dim)
    times, offsets, weights = m.nodes

    def mollified(t, x):
        t = float(t)
        if t > t_end + 1e-12:
            raise MollifierError(f"time {t} beyond the available data (<= {t_end})")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, k = len(x), len(offsets)
        pts = (x[:, None, :] - offsets[None, :, :]).reshape(n * k, m.dim)
        out = np.zeros(n)
        for s, w in zip(times, weights):
            out += np.asarray(evaluate(t - s, pts)).reshape(n, k) @ w
        return out

    return mollified


def _central_weights(order: int):
    offsets = np.array([order / 2 - j for j in range(order + 1)])
    coeffs = np.array([(-1) ** j * math.comb(order, j) for j in range(order + 1)], dtype=float)
    return offsets, coeffs


def derivative_bound_report(phi, m: Mollifier, max_space_order: int, max_time_order: int,
                            probes, space_step: float | None = None,
                            time_step: float | None = None) -> dict:
    """Sup over ``probes`` of finite-difference derivatives of the mollification.

    Returns ``{(time_order, space_order): sup_norm}`` for every pair with
    ``time_order + space_order >= 1`` and ``2 * time_order + space_order <= 4``.
    Spatial derivatives are pure, along each axis; the reported value is the
    max over axes.  Default steps are ``eps / 8`` and ``eps^2 / 8``.
    """
    probes = list(probes)
    if not probes:
        raise MollifierError("probe set is empty")
    if max_space_order < 0 or max_time_order < 0:
        raise MollifierError("orders must be nonnegative")
    dx = space_step if space_step is not None else m.epsilon / 8
    dt = time_step if time_step is not None else m.epsilon ** 2 / 8
    smooth = mollify_surface(phi, m)
    orders = [(mt, k) for mt in range(max_time_order + 1) for k in range(max_space_order + 1)
              if mt + k >= 1 and 2 * mt + k <= 4]
    if not orders:
        raise MollifierError("no derivative orders with 2m + k <= 4 requested")
    report = {}
    for mt, k in orders:
        t_off, t_c = _central_weights(mt)
        x_off, x_c = _central_weights(k)
        best = 0.0
        for t, x in probes:
            x = np.asarray(x, dtype=float).reshape(m.dim)
            for axis in range(m.dim if k else 1):
                shift = np.zeros(m.dim)
                shift[axis] = 1.0
                pts = x[None, :] + np.outer(x_off * dx, shift)
                total = 0.0
                for to, tc in zip(t_off, t_c):
                    total += tc * float(smooth(t + to * dt, pts) @ x_c)
                best = max(best, abs(total) / (dt ** mt * dx ** k))
        report[(mt, k)] = best
    return report
