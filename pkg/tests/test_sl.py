import math

import numpy as np
import pytest

from pcpolicy.lattice import ValueField, build_grid, interpolate, sample_field
from pcpolicy.model import BenchmarkSpec, ControlProblem, closed_form_value, make_benchmark
from pcpolicy.sl import (ConfigError, SchemeConfig, SmoothFunction, generator_apply, moment_report,
                         pcp_solve, sl_solve, sl_step, truncation_error, zeta_support)

from oracles import tree_value


def problem_1d(sigmas, drift=0.0, f=None, g=None, T=1.0):
    return ControlProblem(
        1, 1, T, [[s] for s in sigmas],
        drift=lambda t, x, a: drift,
        diffusion=lambda t, x, a: a[0],
        running_cost=f or (lambda t, x, a: 0.0),
        terminal_cost=g or (lambda x: np.sin(x[..., 0])))


# zeta support and moments

def test_zeta_support_1d():
    s = zeta_support(1, 0.04)
    assert s.atoms[:, 0].tolist() == [0.2, -0.2]
    assert s.probs.tolist() == [0.5, 0.5]


def test_zeta_support_2d():
    s = zeta_support(2, 0.01)
    assert len(s.atoms) == 4 and np.all(s.probs == 0.25)
    assert sorted(map(tuple, s.atoms.tolist())) == [(-0.1, -0.1), (-0.1, 0.1), (0.1, -0.1), (0.1, 0.1)]


def test_zeta_support_unit():
    s = zeta_support(1, 1.0)
    assert s.atoms[:, 0].tolist() == [1.0, -1.0]


def test_zeta_support_invalid():
    with pytest.raises(ConfigError):
        zeta_support(0, 0.1)
    with pytest.raises(ConfigError):
        zeta_support(1, 0.0)


@pytest.mark.parametrize("h", [1.0, 0.3, 0.01])
def test_moment_report_standard(h):
    rep = moment_report(zeta_support(1, h), k_max=7)
    assert rep.mean_norm == 0.0
    assert rep.second_moment_error == 0.0
    assert rep.higher_moment_max == h ** 2  # E zeta^4 dominates, odd moments vanish
    assert rep.constant(h) == 1.0


def test_moment_report_direct_sum_agrees():
    # Same law without the sign shortcut: plain finite sums over float atoms.
    from pcpolicy.sl import ZetaSupport

    s = zeta_support(2, 0.09)
    raw = ZetaSupport(2, 0.09, s.atoms.copy(), s.probs.copy())
    a, b = moment_report(s, 6), moment_report(raw, 6)
    assert a.mean_norm == pytest.approx(b.mean_norm, abs=1e-15)
    assert a.second_moment_error == pytest.approx(b.second_moment_error, abs=1e-15)
    assert a.higher_moment_max == pytest.approx(b.higher_moment_max, rel=1e-14)


def test_moment_report_kmax():
    with pytest.raises(ConfigError):
        moment_report(zeta_support(1, 0.1), 2)


# single steps

def _flat(grid, c, t):
    return ValueField(grid, np.full(grid.counts, c), t)


def test_step_constant_field():
    pb = problem_1d([0.5, 1.5], drift=0.3)
    g = build_grid(([-1.0], [1.0]), 0.1)
    out, pol = sl_step(_flat(g, 2.5, 0.6), pb, 0.5, 0.1, SchemeConfig(0.1, g))
    assert np.all(out.values == 2.5)
    assert np.all(pol.indices == 0)  # tie -> smallest index


def test_step_running_cost_shift():
    pb = problem_1d([1.0], f=lambda t, x, a: 1.0)
    g = build_grid(([-1.0], [1.0]), 0.1)
    out, _ = sl_step(_flat(g, 2.0, 0.1), pb, 0.0, 0.1, SchemeConfig(0.1, g))
    assert np.allclose(out.values, 2.1, atol=1e-15, rtol=0)


def test_step_on_lattice_square():
    h = 0.01
    pb = problem_1d([1.0])
    g = build_grid(([-1.0], [1.0]), math.sqrt(h))
    nxt = sample_field(lambda p: p[:, 0] ** 2, g, 0.5)
    out, _ = sl_step(nxt, pb, 0.5 - h, h, SchemeConfig(h, g))
    x = g.axes()[0]
    inner = slice(1, -1)
    assert np.allclose(out.values[inner], x[inner] ** 2 + h, atol=1e-14, rtol=0)


def test_step_time_label_checked():
    pb = problem_1d([1.0])
    g = build_grid(([-1.0], [1.0]), 0.1)
    with pytest.raises(ConfigError):
        sl_step(_flat(g, 0.0, 0.7), pb, 0.5, 0.1, SchemeConfig(0.1, g))


# full solves

def test_solve_constant_terminal():
    pb = problem_1d([0.2, 0.9], drift=1.0, g=lambda x: np.full(x.shape[:-1], 4.0))
    g = build_grid(([-2.0], [2.0]), 0.1)
    surf = sl_solve(pb, SchemeConfig(0.1, g))
    assert len(surf) == 11
    assert surf.times[-1] == 1.0 and surf.times[0] == 0.0
    assert all(np.all(f.values == 4.0) for f in surf.fields)


def test_solve_terminal_level_is_sampled_g():
    pb = make_benchmark(BenchmarkSpec("sine_heat"))
    g = build_grid(([-3.0], [3.0]), 0.05)
    surf = sl_solve(pb, SchemeConfig(0.05, g))
    assert np.array_equal(surf.fields[-1].values, np.sin(g.axes()[0]))
    assert surf.policies[-1] is None


def test_sine_heat_error_shrinks():
    spec = BenchmarkSpec("sine_heat")
    pb = make_benchmark(spec)
    errs = []
    for h in (0.05, 0.025):
        g = build_grid(([-2 * math.pi], [2 * math.pi]), h)
        v0 = sl_solve(pb, SchemeConfig(h, g)).initial
        exact = closed_form_value(spec, 0.0, g.axes()[0])
        mask = np.abs(g.axes()[0]) <= math.pi
        errs.append(np.max(np.abs(v0.values - exact)[mask]))
    assert errs[1] < errs[0]


def test_single_control_pcp_equals_sl():
    pb = make_benchmark(BenchmarkSpec("sine_heat", {"sigma": 0.8}))
    g = build_grid(([-3.0], [3.0]), 0.05)
    a = sl_solve(pb, SchemeConfig(0.05, g))
    b = pcp_solve(pb, SchemeConfig(0.05, g, 1))
    for fa, fb in zip(a.fields, b.fields):
        assert np.max(np.abs(fa.values - fb.values)) <= 1e-12


def test_pcp_m1_equals_sl_multi_control():
    pb = make_benchmark(BenchmarkSpec("uncertain_vol_butterfly"))
    g = build_grid(([-1.5], [1.5]), 0.05)
    a = sl_solve(pb, SchemeConfig(0.05, g))
    b = pcp_solve(pb, SchemeConfig(0.05, g, 1))
    for fa, fb, pa, pb_ in zip(a.fields, b.fields, a.policies, b.policies):
        assert np.array_equal(fa.values, fb.values)
        if pa is not None:
            assert np.array_equal(pa.indices, pb_.indices)


def test_pcp_coarser_policy_never_better():
    pb = make_benchmark(BenchmarkSpec("uncertain_vol_butterfly", {"sigma_min": 0.05, "sigma_max": 0.4}))
    g = build_grid(([-1.5], [1.5]), 0.02)
    vals = [pcp_solve(pb, SchemeConfig(0.025, g, m)).initial.values for m in (1, 2, 4, 8)]
    for fine, coarse in zip(vals, vals[1:]):
        assert np.all(coarse <= fine + 1e-10)
    assert np.max(vals[0] - vals[-1]) > 1e-4  # the restriction actually costs something


def test_pcp_quadratic_lossless():
    spec = BenchmarkSpec("uncertain_vol_quadratic", {"sigma_min": 0.1, "sigma_max": 0.2})
    pb = make_benchmark(spec)
    h = 0.01
    g = build_grid(([-3.0], [3.0]), 0.2 * math.sqrt(h))
    x = g.axes()[0]
    mask = np.abs(x) <= 1.0
    for m in (1, 2, 5):
        v0 = pcp_solve(pb, SchemeConfig(h, g, m)).initial.values
        assert np.max(np.abs(v0 - closed_form_value(spec, 0.0, x))[mask]) < 1e-10


def test_pcp_misaligned_intervals():
    pb = make_benchmark(BenchmarkSpec("sine_heat"))
    g = build_grid(([-1.0], [1.0]), 0.1)
    with pytest.raises(ConfigError):
        pcp_solve(pb, SchemeConfig(0.1, g, 3))
    with pytest.raises(ConfigError):
        pcp_solve(pb, SchemeConfig(0.3, g, 1))
    with pytest.raises(ConfigError):
        sl_solve(pb, SchemeConfig(0.1, g, 2))


def test_pcp_matches_tree_with_running_cost():
    h = 0.04
    sig = (1.0, 2.0)
    f = lambda t, x, a: math.cos(x) * (a + 1) * 0.3 + t  # noqa: E731
    g = lambda x: abs(x - 0.1) - 0.5 * max(x, 0.0)  # noqa: E731
    pb = problem_1d(sig, f=lambda t, x, a: np.cos(x[..., 0]) * (0.3 if a[0] == 1.0 else 0.6) + t,
                    g=lambda x: np.abs(x[..., 0] - 0.1) - 0.5 * np.maximum(x[..., 0], 0), T=3 * h)
    grid = build_grid(([-2.0], [2.0]), math.sqrt(h))
    for m in (1, 3):
        surf = pcp_solve(pb, SchemeConfig(h, grid, m))
        for x0 in (-0.4, 0.0, 0.6):
            ref = tree_value(sig, f, g, x0, h, 3, m)
            assert interpolate(surf.initial, [x0]) == pytest.approx(ref, abs=1e-10)


# generator and truncation error

def poly(c):
    """phi(t, x) = sum c_k x^k (1-D, static) with exact derivatives."""
    c = np.asarray(c, dtype=float)
    dc = np.polynomial.polynomial.polyder(c)
    ddc = np.polynomial.polynomial.polyder(c, 2)
    pv = np.polynomial.polynomial.polyval
    return SmoothFunction(value=lambda t, x: float(pv(x[0], c)), dt=lambda t, x: 0.0,
                          grad=lambda t, x: np.array([pv(x[0], dc)]),
                          hess=lambda t, x: np.array([[pv(x[0], ddc)]]))


def test_generator_square():
    pb = problem_1d([1.0], drift=1.0)
    assert generator_apply(poly([0, 0, 1]), pb, 0, 0.0, [0.0]) == 1.0


def test_generator_time_only():
    phi = SmoothFunction(lambda t, x: t, lambda t, x: 1.0, lambda t, x: np.zeros(1),
                         lambda t, x: np.zeros((1, 1)))
    pb = problem_1d([3.0], drift=-2.0)
    assert generator_apply(phi, pb, 0, 0.4, [1.7]) == 1.0


def test_generator_linear_ignores_diffusion():
    pb = problem_1d([5.0], drift=0.25)
    assert generator_apply(poly([1.0, 2.0]), pb, 0, 0.0, [0.3]) == 0.5


def test_generator_2d_trace():
    pb = ControlProblem(2, 2, 1.0, [[0.0]], drift=lambda t, x, a: np.array([1.0, -1.0]),
                        diffusion=lambda t, x, a: np.array([[1.0, 0.5], [0.0, 2.0]]),
                        running_cost=lambda t, x, a: 0.0, terminal_cost=lambda x: 0 * x[..., 0])
    # phi = x1 * x2: grad (x2, x1), hess [[0,1],[1,0]]; tr(S S^T H) = 2 (S S^T)_{12} = 2 * 1.0
    phi = SmoothFunction(lambda t, x: x[0] * x[1], lambda t, x: 0.0,
                         lambda t, x: np.array([x[1], x[0]]),
                         lambda t, x: np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert generator_apply(phi, pb, 0, 0.0, [2.0, 3.0]) == pytest.approx(3.0 - 2.0 + 1.0)


@pytest.mark.parametrize("h", [0.1, 0.01, 0.001])
def test_truncation_square(h):
    pb = problem_1d([1.0], drift=1.0)
    assert truncation_error(poly([0, 0, 1]), pb, 0, 0.0, [0.0], h) == pytest.approx(h, abs=1e-12)


@pytest.mark.parametrize("h", [0.3, 0.05])
def test_truncation_affine_exact(h):
    phi = SmoothFunction(lambda t, x: 2 * t - 3 * x[0] + 1, lambda t, x: 2.0,
                         lambda t, x: np.array([-3.0]), lambda t, x: np.zeros((1, 1)))
    pb = problem_1d([0.7], drift=0.4)
    assert truncation_error(phi, pb, 0, 0.2, [0.5], h) <= 1e-13


def test_truncation_quartic():
    pb = problem_1d([1.0])
    for h in (0.1, 0.01):
        assert truncation_error(poly([0, 0, 0, 0, 1]), pb, 0, 0.0, [0.0], h) == pytest.approx(h, rel=1e-14)


def test_truncation_over_h_bounded():
    pb = problem_1d([0.8], drift=0.6)
    phi = poly([0.3, -1.0, 0.5, 0.2, -0.1])
    ratios = [truncation_error(phi, pb, 0, 0.0, [0.4], h) / h for h in (0.1, 0.01, 0.001, 1e-4)]
    assert max(ratios) < 2 * ratios[0] + 1
    assert abs(ratios[-1] - ratios[-2]) < 0.01 * max(1.0, ratios[-2])
