"""Piecewise constant policy and semi-Lagrangian solvers for stochastic control."""

__version__ = "0.1.0"

from .lattice import (PolicyField, SpatialGrid, ValueField, ValueSurface, build_grid, interpolate,
                      sample_field, sup_diff)
from .model import BenchmarkSpec, ControlProblem, closed_form_value, eval_coeffs, make_benchmark
from .rates import RateTerm, error_ladder, estimate_order, optimize_rate
from .sde import PiecewisePolicy, mc_cost, shaken_problem, simulate_path
from .sl import SchemeConfig, moment_report, pcp_solve, sl_solve, sl_step, zeta_support

__all__ = [
    "BenchmarkSpec", "ControlProblem", "PiecewisePolicy", "PolicyField", "RateTerm", "SchemeConfig",
    "SpatialGrid", "ValueField", "ValueSurface", "build_grid", "closed_form_value", "error_ladder",
    "estimate_order", "eval_coeffs", "interpolate", "make_benchmark", "mc_cost", "moment_report",
    "optimize_rate", "pcp_solve", "sample_field", "shaken_problem", "simulate_path", "sl_solve",
    "sl_step", "sup_diff", "zeta_support",
]
