import csv
import math

import numpy as np
import pytest
from scipy.special import ellipe
from scipy.spatial.transform import Rotation

from geoflow import flow as F
from geoflow import metrics as M
from geoflow.errors import ToleranceNotAchievedError
from geoflow.integrate import propagate
from conftest import AXES, random_unit_states


def test_unit_speed_enforced(sphere):
    th = F.phase_point(sphere, [0.2, 0.1], 0.5)
    g = sphere.metric_tensor(np.array([0]), th.base.coords[None])[0]
    assert th.velocity @ g @ th.velocity == pytest.approx(1.0, abs=1e-15)
    bad = F.PhasePoint(th.base, 1.1 * th.velocity)
    with pytest.raises(ValueError):
        F.integrate_geodesic(sphere, bad, 1.0)


@pytest.mark.parametrize("angle", [0.0, 1.0, 2.5])
def test_sphere_geodesics_close(sphere, angle):
    th = F.phase_point(sphere, [0.3, -0.7], angle)
    arc = F.integrate_geodesic(sphere, th, 2 * math.pi)
    assert np.allclose(arc.ambient()[-1], th.base.ambient, atol=1e-6)
    X0, Xd0 = sphere._lift(np.array([th.base.chart]), th.base.coords[None])[:2]
    c, u = arc.end.base.chart, arc.end.base.coords
    _, Xd1 = sphere._lift(np.array([c]), u[None])[:2]
    assert np.allclose(Xd1[0] @ arc.end.velocity, Xd0[0] @ th.velocity, atol=1e-6)


def test_torus_straight_line(torus):
    arc = F.integrate_geodesic(torus, F.phase_point(torus, [0.0, 0.0], 0.0), 0.5)
    assert np.allclose(arc.end.base.coords, [0.5, 0.0], atol=1e-12)


def test_ellipse_perimeter_closure():
    e = M.ellipsoid(*AXES)
    # start on the (y, z) principal ellipse heading along it
    p = e.point_from_ambient(np.array([0.0, math.sqrt(AXES[1]), 0.0]))
    _, Xd = e._lift(np.array([p.chart]), p.coords[None])[:2]
    v = np.linalg.lstsq(Xd[0], np.array([0.0, 0.0, 1.0]), rcond=None)[0]
    th = F.phase_point(e, p.coords, v, p.chart)
    b, a = math.sqrt(AXES[1]), math.sqrt(AXES[2])
    perimeter = 4 * a * ellipe(1 - (b / a) ** 2)
    arc = F.integrate_geodesic(e, th, perimeter)
    assert np.allclose(arc.ambient()[-1], p.ambient, atol=1e-6)
    assert np.max(np.abs(arc.ambient()[:, 0])) < 1e-9
    half = F.integrate_geodesic(e, th, perimeter / 2)
    assert np.allclose(half.ambient()[-1], -p.ambient, atol=1e-6)


def test_arc_invariants(ellipsoid):
    th = F.phase_point(ellipsoid, [0.4, 0.2], 0.7)
    T = 12.0
    arc = F.integrate_geodesic(ellipsoid, th, T)
    t0, p0 = arc.samples[0]
    assert t0 == 0.0 and np.array_equal(p0.base.coords, th.base.coords)
    assert np.array_equal(p0.velocity, th.velocity)
    assert abs(arc.arc_length() - T) < 1e-6 * T
    assert arc.t[-1] == pytest.approx(T)
    assert arc.energy_drift < F.DEFAULT_MAX_DRIFT


@pytest.mark.parametrize("name", ["sphere", "ellipsoid"])
def test_energy_conservation_long(builtins, name, rng):
    m = builtins[name]
    c, u, v = random_unit_states(m, 20, rng)
    res = propagate(m, c, np.concatenate([u, v], 1), 100.0)
    assert res.energy_drift.max() < 1e-6


def test_drift_bound_raises(ellipsoid):
    th = F.phase_point(ellipsoid, [0.4, 0.2], 0.7)
    with pytest.raises(ToleranceNotAchievedError):
        F.integrate_geodesic(ellipsoid, th, 50.0, tol=1e-4, max_drift=1e-12)


def test_jacobi_closed_forms(sphere, torus):
    arc = F.integrate_geodesic(sphere, F.phase_point(sphere, [0.1, 0.5], 1.3), 7.0)
    fr = F.jacobi_propagate(sphere, arc, [0.0, 0.0], [0.0, 1.0])
    assert np.max(np.abs(fr.J_norm - np.sin(fr.t))) < 1e-6
    assert np.max(np.abs(fr.Jdot_norm - np.cos(fr.t))) < 1e-6
    arc = F.integrate_geodesic(torus, F.phase_point(torus, [0.1, 0.5], 0.4), 5.0)
    fr = F.jacobi_propagate(torus, arc, [0.0, 0.0], [0.0, 1.0])
    assert np.max(np.abs(fr.J_norm - fr.t)) < 1e-10


def test_tangential_part_affine(paternain):
    arc = F.integrate_geodesic(paternain, F.phase_point(paternain, [0.1, 0.5], 0.4), 5.0)
    fr = F.jacobi_propagate(paternain, arc, [0.3, 0.2], [-0.7, 0.1])
    assert np.max(np.abs(fr.J_tan - (0.3 - 0.7 * fr.t))) < 1e-8
    J, Jd = fr.vectors()
    g = paternain.metric_tensor(arc.chart, arc.states[:, 0:2])
    assert np.allclose(M.inner(g, J, arc.states[:, 2:4]), fr.J_tan, atol=1e-9)


def test_normal_jacobi_ode_residual(ellipsoid):
    arc = F.integrate_geodesic(ellipsoid, F.phase_point(ellipsoid, [0.1, 0.5], 0.4), 6.0)
    fr = F.jacobi_propagate(ellipsoid, arc, [0.0, 1.0], [0.0, 0.5])
    K = ellipsoid.curvature(arc.chart, arc.states[:, 0:2])
    # u'' = -K u checked with the recorded derivative by a centred difference
    t, ud = fr.t, fr.Jdot_norm
    udd = np.gradient(ud, t)
    inner_pts = slice(5, -5)
    assert np.max(np.abs(udd[inner_pts] + K[inner_pts] * fr.J_norm[inner_pts])) < 5e-2


@pytest.mark.parametrize("name", ["sphere", "torus", "ellipsoid", "paternain"])
def test_wronskian_constant(builtins, name):
    m = builtins[name]
    arc = F.integrate_geodesic(m, F.phase_point(m, [0.2, 0.3], 2.0), 20.0)
    w = arc.wronskian()
    assert np.max(np.abs(w - 1.0)) < 1e-7


@pytest.mark.parametrize("name", ["sphere", "torus", "ellipsoid", "paternain"])
def test_flow_differential_matches_jacobi(builtins, name, rng):
    m = builtins[name]
    c, u, v = random_unit_states(m, 100, rng)
    xi = rng.normal(size=(100, 4))
    err = F.flow_differential_check(m, c, u, v, xi, 5.0)
    assert err.max() < 1e-4


def test_vertical_determinant_oracles(sphere, torus):
    for T in [0.0, 0.5, 3.0, 10.0]:
        # linear flow dφ_T = [[I, T I], [0, I]] applied to the vertical basis
        D = np.block([[np.eye(2), T * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
        cols = D @ np.vstack([np.zeros((2, 2)), np.eye(2)])
        ref = math.sqrt(np.linalg.det(cols.T @ cols))
        th = F.phase_point(torus, [0.3, 0.1], 0.8)
        assert F.vertical_determinant(torus, th, T) == pytest.approx(ref, rel=1e-10)
    th = F.phase_point(sphere, [0.3, 0.1], 0.8)
    assert F.vertical_determinant(sphere, th, 0.0) == 1.0
    # tangential column (π, 0, 1, 0), normal column (0, sin π, 0, cos π)
    assert F.vertical_determinant(sphere, th, math.pi) == pytest.approx(math.sqrt(1 + math.pi**2), rel=1e-8)


def _ambient_velocity(m, chart, u, v):
    _, Xd = m._lift(np.array([chart]), np.asarray(u)[None])[:2]
    return Xd[0] @ v


@pytest.mark.parametrize("kind", ["sphere", "ellipsoid"])
def test_chart_rotation_invariance(kind):
    R = Rotation.from_euler("xyz", [0.4, -0.9, 1.3]).as_matrix()
    make = (lambda rot: M.round_sphere(1.0, rot)) if kind == "sphere" else (lambda rot: M.ellipsoid(*AXES, rotation=rot))
    m0, m1 = make(None), make(R)
    p0 = m0.point([0.3, 0.5])
    th0 = F.phase_point(m0, p0.coords, 0.9)
    V = _ambient_velocity(m0, p0.chart, p0.coords, th0.velocity)
    p1 = m1.point_from_ambient(p0.ambient)
    _, Xd = m1._lift(np.array([p1.chart]), p1.coords[None])[:2]
    v1 = np.linalg.lstsq(Xd[0], V, rcond=None)[0]
    th1 = F.PhasePoint(p1, v1)
    T = 15.0
    a0 = F.integrate_geodesic(m0, th0, T)
    a1 = F.integrate_geodesic(m1, th1, T)
    assert np.linalg.norm(a0.ambient()[-1] - a1.ambient()[-1]) < 1e-8


def test_connection_roundtrip(paternain, rng):
    c, u, v = random_unit_states(paternain, 10, rng)
    J, Jd = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
    dx, dv = F.connection_join(paternain, c, u, v, J, Jd)
    J2, Jd2 = F.connection_split(paternain, c, u, v, dx, dv)
    assert np.allclose(J2, J) and np.allclose(Jd2, Jd)


def test_arc_csv(sphere, tmp_path):
    arc = F.integrate_geodesic(sphere, F.phase_point(sphere, [0.2, 0.3], 1.0), 1.0)
    path = tmp_path / "arc.csv"
    arc.to_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "chart", "u", "v", "u_dot", "v_dot", "x", "y", "z"]
    assert len(rows) == len(arc.t) + 1
    assert float(rows[-1][0]) == pytest.approx(1.0)
