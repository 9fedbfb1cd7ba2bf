import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcpolicy.lattice import (GridError, PolicyField, ValueField, build_grid, interpolate,
                              interpolate_many, interpolation_stencil, read_field_csv,
                              sample_field, sup_diff, write_field_csv, write_surface)
from pcpolicy.lattice import ValueSurface


def test_build_grid_1d():
    g = build_grid(([-1.0], [1.0]), 0.5)
    assert g.axes()[0].tolist() == [-1.0, -0.5, 0.0, 0.5, 1.0]
    assert g.counts == (5,)


def test_build_grid_2d():
    g = build_grid(([0.0, 0.0], [1.0, 1.0]), 0.5)
    assert g.counts == (3, 3) and g.nodes().shape == (9, 2)


def test_build_grid_extends_upper_bound():
    g = build_grid(([-2 * math.pi], [2 * math.pi]), 0.05)
    assert g.upper[0] >= 2 * math.pi
    assert g.upper[0] - 0.05 < 2 * math.pi
    assert g.counts[0] == math.ceil(4 * math.pi / 0.05) + 1


@pytest.mark.parametrize("spacing", [0.0, -0.1, math.nan])
def test_build_grid_rejects_bad_spacing(spacing):
    with pytest.raises(GridError):
        build_grid(([0.0], [1.0]), spacing)


def test_build_grid_rejects_empty_box():
    with pytest.raises(GridError):
        build_grid(([1.0], [1.0]), 0.1)


def test_interpolate_reproduces_linear():
    g = build_grid(([-1.0, 0.0], [1.0, 2.0]), [0.25, 0.5])
    fld = sample_field(lambda p: 3 * p[:, 0] - 2 * p[:, 1] + 0.5, g, 0.0)
    for p in [(0.1, 0.3), (-0.77, 1.9), (0.999, 0.01)]:
        assert interpolate(fld, p) == pytest.approx(3 * p[0] - 2 * p[1] + 0.5, abs=1e-12)


def test_interpolate_nodes_bitwise():
    g = build_grid(([-1.3], [2.1]), 0.1)
    fld = sample_field(lambda p: np.exp(np.sin(7 * p[:, 0])), g, 0.0)
    nodes = g.nodes()
    assert np.array_equal(interpolate_many(fld, nodes), fld.values.ravel())


def test_interpolate_midpoint():
    g = build_grid(([-1.0], [1.0]), 2.0)
    fld = ValueField(g, [0.0, 2.0], 0.0)
    assert interpolate(fld, [0.0]) == 1.0


def test_interpolate_clamps():
    g = build_grid(([0.0], [1.0]), 0.5)
    fld = ValueField(g, [1.0, 5.0, 2.0], 0.0)
    assert interpolate(fld, [-10.0]) == 1.0
    assert interpolate(fld, [10.0]) == 2.0


def test_interpolate_rejects_nan():
    g = build_grid(([0.0], [1.0]), 0.5)
    with pytest.raises(GridError):
        interpolate(ValueField(g, [0, 1, 2], 0.0), [math.nan])


def test_multilinear_exact_on_bilinear():
    g = build_grid(([0.0, 0.0], [1.0, 1.0]), 0.25)
    fn = lambda p: 1 + p[:, 0] - 2 * p[:, 1] + 4 * p[:, 0] * p[:, 1]  # noqa: E731
    fld = sample_field(fn, g, 0.0)
    pts = np.random.default_rng(2).random((50, 2))
    assert np.allclose(interpolate_many(fld, pts), fn(pts), atol=1e-12, rtol=0)


def test_sample_field_examples():
    g = build_grid(([0.0], [math.pi / 2]), math.pi / 2)
    assert sample_field(lambda p: np.sin(p[:, 0]), g, 1.0).values.tolist() == [0.0, 1.0]
    g3 = build_grid(([-1.0], [1.0]), 1.0)
    assert sample_field(lambda p: np.full(len(p), 3.0), g3, 0.0).values.tolist() == [3.0] * 3
    assert sample_field(lambda p: p[:, 0] ** 2, g3, 0.0).values.tolist() == [1.0, 0.0, 1.0]
    with pytest.raises(GridError):
        sample_field(lambda p: np.full(len(p), np.nan), g3, 0.0)


def test_sup_diff():
    g = build_grid(([0.0], [1.0]), 0.1)
    a = sample_field(lambda p: np.ones(len(p)), g, 0.0)
    z = sample_field(lambda p: np.zeros(len(p)), g, 0.0)
    assert sup_diff(a, a) == 0.0
    assert sup_diff(a, z) == 1.0
    spike = z.values.copy()
    spike[0] = 5.0
    spike[5] = 0.25
    b = ValueField(g, spike, 0.0)
    assert sup_diff(b, z) == 5.0
    assert sup_diff(b, z, trim=0.1) == 0.25
    assert sup_diff(b, z, box=([0.4], [0.6])) == 0.25
    other = build_grid(([0.0], [1.0]), 0.2)
    with pytest.raises(GridError):
        sup_diff(a, sample_field(lambda p: p[:, 0], other, 0.0))


def test_policy_lookup_nearest():
    g = build_grid(([0.0], [1.0]), 0.5)
    pol = PolicyField(g, [0, 1, 0], 0.0)
    assert pol.lookup(np.array([[0.1], [0.4], [0.8], [5.0]])).tolist() == [0, 1, 0, 0]


def test_csv_roundtrip(tmp_path):
    g = build_grid(([-1.0, 0.0], [1.0, 1.0]), 0.5)
    fld = sample_field(lambda p: p[:, 0] * 0.1 + p[:, 1] ** 3, g, 0.3)
    path = tmp_path / "f.csv"
    write_field_csv(fld, path)
    header = path.read_text().splitlines()[0]
    assert header == "x_1,x_2,value"
    back = read_field_csv(path, g, 0.3)
    assert np.array_equal(back.values, fld.values)


def test_surface_dump_one_file_per_level(tmp_path):
    g = build_grid(([0.0], [1.0]), 0.5)
    surf = ValueSurface()
    for t in (0.0, 0.5, 1.0):
        surf.add(ValueField(g, [t, t, t], t), PolicyField(g, [0, 0, 0], t) if t < 1 else None)
    files = write_surface(surf, tmp_path)
    names = sorted(p.name for p in files)
    assert len([n for n in names if n.startswith("value_t")]) == 3
    assert len([n for n in names if n.startswith("policy_t")]) == 2


def test_surface_evaluate_linear_in_time():
    g = build_grid(([0.0], [1.0]), 1.0)
    surf = ValueSurface()
    surf.add(ValueField(g, [0.0, 0.0], 0.0))
    surf.add(ValueField(g, [2.0, 4.0], 1.0))
    assert surf.evaluate(0.25, np.array([[0.5]]))[0] == pytest.approx(0.75)
    assert surf.evaluate(-1.0, np.array([[0.5]]))[0] == 0.0
    with pytest.raises(GridError):
        surf.evaluate(1.5, np.array([[0.5]]))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(0, 10_000))
def test_interpolation_monotone_and_bounded(d, seed):
    rng = np.random.default_rng(seed)
    g = build_grid((-rng.random(d), 1 + rng.random(d)), 0.2 + 0.3 * rng.random(d))
    a = rng.standard_normal(g.counts)
    b = a + rng.random(g.counts)
    fa, fb = ValueField(g, a, 0.0), ValueField(g, b, 0.0)
    pts = rng.uniform(-2, 3, (40, d))
    ia, ib = interpolate_many(fa, pts), interpolate_many(fb, pts)
    assert np.all(ia <= ib)
    assert np.all(ia >= a.min() - 1e-12) and np.all(ia <= a.max() + 1e-12)
    _, w = interpolation_stencil(g, pts)
    assert np.all(w >= 0) and np.allclose(w.sum(axis=0), 1.0, atol=1e-14)
