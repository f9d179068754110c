import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geoflow import counting as C
from geoflow import metrics as M


def lattice_count(d, T):
    """Number of k in Z² with |k + d| <= T."""
    n = int(math.ceil(T)) + 2
    k = np.stack(np.meshgrid(np.arange(-n, n + 1), np.arange(-n, n + 1)), -1).reshape(-1, 2)
    return int(np.sum(np.linalg.norm(k + d, axis=1) <= T))


def sphere_pair(d):
    return np.array([1.0, 0.0, 0.0]), np.array([math.cos(d), math.sin(d), 0.0])


def test_torus_self_count(torus):
    x = torus.point([0.0, 0.0])
    res = C.count_geodesics(torus, x, x, 2.5)
    assert res.count == 21
    assert res.includes_trivial
    assert len(res.lengths) == 20
    assert lattice_count(np.zeros(2), 2.5) == 21


def test_sphere_pair_count(sphere):
    X, Y = sphere_pair(1.0)
    res = C.count_geodesics(sphere, sphere.point_from_ambient(X), sphere.point_from_ambient(Y), 7.0)
    assert res.count == 2
    assert np.allclose(res.lengths, [1.0, 2 * math.pi - 1.0], atol=1e-8)
    for arc in res.arcs:
        assert np.allclose(arc.ambient()[-1], Y, atol=1e-6)
        assert arc.length <= 7.0


def test_arcs_shorter_than_fan_step(torus, sphere):
    x = torus.point([0.40625, 0.0])
    res = C.count_geodesics(torus, x, torus.point([0.375, 0.0]), 1.6)
    assert res.lengths[0] == pytest.approx(0.03125, abs=1e-10)
    X, Y = sphere_pair(0.02)
    res = C.count_geodesics(sphere, sphere.point_from_ambient(X), sphere.point_from_ambient(Y), 1.0)
    assert res.count == 1 and res.lengths[0] == pytest.approx(0.02, abs=1e-9)


def test_short_horizon_counts(sphere, torus):
    X, Y = sphere_pair(1.0)
    x, y = sphere.point_from_ambient(X), sphere.point_from_ambient(Y)
    assert C.count_geodesics(sphere, x, y, 0.5).count == 0
    assert C.count_geodesics(sphere, x, x, 0.5).count == 1
    assert C.count_geodesics(torus, torus.point([0.1, 0.1]), torus.point([0.6, 0.5]), 0.1).count == 0


def test_antipode_is_degenerate(sphere):
    X = np.array([0.0, 0.6, 0.8])
    res = C.count_geodesics(sphere, sphere.point_from_ambient(X), sphere.point_from_ambient(-X), 4.0)
    assert res.degenerate
    assert res.count == 0


def test_torus_counts_match_lattice(torus, rng):
    x = torus.point([0.2, 0.7])
    for _ in range(5):
        yu = rng.uniform(0, 1, 2)
        res = C.count_geodesics(torus, x, torus.point(yu), 3.0)
        assert res.count == lattice_count(yu - np.array([0.2, 0.7]), 3.0)


def test_count_monotone_in_T(ellipsoid):
    x, y = ellipsoid.point([0.3, 0.2]), ellipsoid.point([-0.5, 0.9], 1)
    counts = [C.count_geodesics(ellipsoid, x, y, T).count for T in (2.0, 4.0, 6.0, 8.0)]
    assert counts == sorted(counts)
    assert counts[-1] > counts[0]


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(0, 1, exclude_max=True)] * 4), st.tuples(st.integers(-1, 1), st.integers(-1, 1)))
def test_torus_translation_symmetry(pts, shift):
    torus = M.flat_torus()
    x = np.array(pts[:2])
    d = np.array(pts[2:]) - x
    y = np.mod(x + d, 1.0)
    T = 1.6
    n1 = C.count_geodesics(torus, torus.point(x), torus.point(y), T).count
    x2 = np.mod(x + np.array([0.37, 0.81]) + np.array(shift), 1.0)
    y2 = np.mod(x2 + d, 1.0)
    n2 = C.count_geodesics(torus, torus.point(x2), torus.point(y2), T).count
    assert n1 == n2 == lattice_count(d, T)


def test_count_result_json(sphere):
    X, Y = sphere_pair(1.0)
    res = C.count_geodesics(sphere, sphere.point_from_ambient(X), sphere.point_from_ambient(Y), 7.0)
    d = json.loads(res.to_json())
    assert d["count"] == 2 and d["degenerate"] is False
    assert set(["x", "y", "T", "lengths", "count", "degenerate"]) <= set(d)


def test_dedupe_rule():
    alpha = np.array([0.1, 0.1 + 1e-4, 2.0])
    t = np.array([1.0, 1.0 + 1e-9, 1.0])
    keep, n_close = C._dedupe(alpha, t, 2 * np.pi / 4096, 1e-6)
    assert len(keep) == 2
    # same length but directions further apart than half the resolution: distinct
    keep, _ = C._dedupe(np.array([0.1, 0.1 + 1e-2]), np.array([1.0, 1.0]), 2 * np.pi / 4096, 1e-6)
    assert len(keep) == 2


def test_berger_bott_closed_forms(sphere, torus):
    x = sphere.point([0.3, 0.4])
    assert C.berger_bott_integral(sphere, x, math.pi) == pytest.approx(4 * math.pi, rel=1e-8)
    xt = torus.point([0.3, 0.4])
    for T in (1.0, 2.5):
        assert C.berger_bott_integral(torus, xt, T) == pytest.approx(math.pi * T * T, rel=1e-10)
    assert C.berger_bott_integral(sphere, x, 0.0) == 0.0


def test_direct_integral_oracles(sphere, torus):
    v, se = C.counting_integral_direct(sphere, sphere.point([0.3, 0.4]), math.pi, n_samples=400)
    assert v == pytest.approx(4 * math.pi, rel=1e-9)
    v, se = C.counting_integral_direct(torus, torus.point([0.3, 0.4]), 2.5, n_samples=2000)
    assert abs(v - math.pi * 2.5**2) < max(4 * se, 0.02 * math.pi * 2.5**2)
    v, _ = C.counting_integral_direct(torus, torus.point([0.3, 0.4]), 0.01, n_samples=200)
    assert v < 0.01


@pytest.mark.slow
@pytest.mark.parametrize("name", ["sphere", "torus"])
def test_counting_identity(builtins, name):
    m = builtins[name]
    x = m.point([0.3, 0.4])
    T = [2.0, 5.0]
    series = C.counting_integral_series(m, x, T, n_samples=2000)
    for Ti, v in zip(T, series.values):
        bb = C.berger_bott_integral(m, x, Ti)
        assert abs(v - bb) / bb < 0.02


@pytest.mark.slow
@pytest.mark.parametrize("name", ["sphere", "torus"])
def test_polynomial_growth_of_counting_integral(builtins, name):
    m = builtins[name]
    T = np.linspace(2, 20, 10)
    series = C.counting_integral_series(m, m.point([0.3, 0.4]), T, n_samples=150)
    fits = C.fit_polynomial_growth(T, series.values, max_degree=2)
    assert min(f.relative_residual for f in fits) < 0.05
