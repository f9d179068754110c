"""Geodesic flow on the unit tangent bundle and its linearisation.

Jacobi fields along a unit-speed geodesic split into a tangential part,
which is affine in t, and a normal part ``J_n(t) n(t)`` where ``n`` is the
parallel unit normal and ``J_n'' + K J_n = 0``.  Arcs co-integrate the two
fundamental normal solutions (ξ: 1, 0 and η: 0, 1), so any Jacobi field along
a stored arc is a linear combination evaluated at the stored samples.

The identification of T_θ(TM) with T_xM ⊕ T_xM uses the connection map: a
coordinate tangent vector (δx, δv) corresponds to (J, J') = (δx, δv + Γ(v, δx)).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ToleranceNotAchievedError
from .integrate import DEFAULT_RTOL, propagate
from .metrics import SurfaceMetric, SurfacePoint, _as_batch, inner

UNIT_SPEED_TOL = 1e-9
DEFAULT_MAX_DRIFT = 1e-6


@dataclass(frozen=True)
class PhasePoint:
    base: SurfacePoint
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(2))

    @property
    def state(self):
        return np.concatenate([self.base.coords, self.velocity])


def phase_point(metric: SurfaceMetric, coords, direction, chart=0) -> PhasePoint:
    """Unit tangent vector at ``coords``.

    ``direction`` is either an angle measured from ∂/∂u1 in the positively
    oriented orthonormal frame, or a chart vector that gets normalised.
    """
    p = metric.point(coords, chart)
    c, u = _as_batch(p.chart, p.coords)
    if np.ndim(direction) == 0:
        e1, e2 = metric.frame(c, u)
        v = np.cos(direction) * e1[0] + np.sin(direction) * e2[0]
    else:
        v = np.asarray(direction, dtype=float).reshape(2)
        g = metric.metric_tensor(c, u)[0]
        v = v / np.sqrt(v @ g @ v)
    return PhasePoint(p, v)


def check_unit(metric, theta: PhasePoint, tol=UNIT_SPEED_TOL):
    c, u = metric._check_point(theta.base)
    g = metric.metric_tensor(c, u)[0]
    speed2 = float(theta.velocity @ g @ theta.velocity)
    if abs(speed2 - 1.0) > tol:
        raise ValueError(f"phase point is not on the unit sphere bundle (g(v,v) = {speed2:.12g})")
    return c, u


def _phase_from_state(metric, chart, y) -> PhasePoint:
    amb = metric.embed(np.array([chart]), y[None, 0:2])
    base = SurfacePoint(int(chart), y[0:2], None if amb is None else amb[0])
    return PhasePoint(base, y[2:4])


@dataclass
class GeodesicArc:
    """Integrated unit-speed geodesic with samples at the accepted integrator steps.

    ``xi`` and ``eta`` hold the fundamental normal Jacobi solutions
    (value, derivative) at every sample.
    """

    start: PhasePoint
    length: float
    end: PhasePoint
    t: np.ndarray
    chart: np.ndarray
    states: np.ndarray
    xi: np.ndarray
    eta: np.ndarray
    energy_drift: float
    metric: SurfaceMetric = field(repr=False, default=None)

    @property
    def samples(self):
        return [(float(t), _phase_from_state(self.metric, c, y)) for t, c, y in zip(self.t, self.chart, self.states)]

    def arc_length(self) -> float:
        """∫ |γ'| dt over the samples (trapezoid rule on the recorded speeds)."""
        g = self.metric.metric_tensor(self.chart, self.states[:, 0:2])
        speed = np.sqrt(inner(g, self.states[:, 2:4], self.states[:, 2:4]))
        return float(np.sum(0.5 * (speed[1:] + speed[:-1]) * np.diff(self.t)))

    def ambient(self):
        return self.metric.embed(self.chart, self.states[:, 0:2])

    def wronskian(self):
        return self.xi[:, 0] * self.eta[:, 1] - self.eta[:, 0] * self.xi[:, 1]

    def to_csv(self, path):
        write_arc_csv(self, path)


def integrate_geodesic(metric: SurfaceMetric, theta: PhasePoint, T: float, tol=DEFAULT_RTOL,
                       max_drift=DEFAULT_MAX_DRIFT) -> GeodesicArc:
    """Follow the geodesic with initial condition θ for time T.

    Raises
    ------
    ToleranceNotAchievedError
        If the speed drifted by more than ``max_drift`` before renormalisation.
    """
    if T < 0:
        raise ValueError("T must be non-negative")
    c, u = check_unit(metric, theta)
    y0 = np.concatenate([u[0], theta.velocity, [1.0, 0.0, 0.0, 1.0]])[None]
    res = propagate(metric, c, y0, T, n_jacobi=2, rtol=tol, atol=tol * 1e-2, record_steps=True)
    drift = float(res.energy_drift[0])
    if drift > max_drift:
        raise ToleranceNotAchievedError(f"energy drift {drift:.3g} exceeds {max_drift:.3g}")
    t = np.array([s[0] for s in res.step_t])
    chart = np.array([c[0] for c in res.step_chart])
    Y = np.array([y[0] for y in res.step_y])
    # the stored final step precedes the terminal speed renormalisation
    Y[-1] = res.y[0]
    chart[-1] = res.chart[0]
    return GeodesicArc(
        start=theta,
        length=float(T),
        end=_phase_from_state(metric, chart[-1], Y[-1]),
        t=t,
        chart=chart,
        states=Y[:, 0:4],
        xi=Y[:, 4:6],
        eta=Y[:, 6:8],
        energy_drift=drift,
        metric=metric,
    )


@dataclass
class JacobiFrame:
    """Tangential/normal components of a Jacobi field at the samples of an arc."""

    along: GeodesicArc = field(repr=False)
    t: np.ndarray
    J_tan: np.ndarray
    J_norm: np.ndarray
    Jdot_tan: np.ndarray
    Jdot_norm: np.ndarray

    def vectors(self):
        """(J, J') as chart vectors at each sample."""
        arc = self.along
        m = arc.metric
        v = arc.states[:, 2:4]
        n = m.unit_normal(arc.chart, arc.states[:, 0:2], v)
        J = self.J_tan[:, None] * v + self.J_norm[:, None] * n
        Jd = self.Jdot_tan[:, None] * v + self.Jdot_norm[:, None] * n
        return J, Jd


def jacobi_propagate(metric: SurfaceMetric, arc: GeodesicArc, J0, J0dot) -> JacobiFrame:
    """Jacobi field along ``arc`` from initial (tangential, normal) components."""
    J0 = np.asarray(J0, dtype=float)
    J0dot = np.asarray(J0dot, dtype=float)
    t = arc.t
    J_tan = J0[0] + t * J0dot[0]
    Jd_tan = np.full_like(t, J0dot[0])
    J_n = J0[1] * arc.xi[:, 0] + J0dot[1] * arc.eta[:, 0]
    Jd_n = J0[1] * arc.xi[:, 1] + J0dot[1] * arc.eta[:, 1]
    return JacobiFrame(arc, t, J_tan, J_n, Jd_tan, Jd_n)


# ---------------------------------------------------------------------------
# vertical determinant
# ---------------------------------------------------------------------------


def _gram_volume(T, u, du):
    # columns (T, 0, 1, 0) and (0, u, 0, u') are orthogonal in the product metric
    return np.sqrt((1.0 + T * T) * (u * u + du * du))


def vertical_determinant(metric: SurfaceMetric, theta: PhasePoint, T: float, tol=DEFAULT_RTOL) -> float:
    """Gram volume of dφ_T applied to the vertical basis at θ."""
    c, u = check_unit(metric, theta)
    if T == 0:
        return 1.0
    y0 = np.concatenate([u[0], theta.velocity, [0.0, 1.0]])[None]
    res = propagate(metric, c, y0, T, n_jacobi=1, rtol=tol, atol=tol * 1e-2)
    return float(_gram_volume(T, res.y[0, 4], res.y[0, 5]))


def vertical_determinants(metric: SurfaceMetric, chart, u, v, T_grid, tol=DEFAULT_RTOL):
    """Batched vertical determinants on a common time grid; shape (len(T_grid), N)."""
    T_grid = np.asarray(T_grid, dtype=float)
    N = len(u)
    y0 = np.concatenate([u, v, np.zeros((N, 1)), np.ones((N, 1))], axis=1)
    res = propagate(metric, chart, y0, T_grid[-1], n_jacobi=1, rtol=tol, atol=tol * 1e-2,
                    t_eval=T_grid, record_cols=slice(4, 6))
    U = res.eval_y[..., 0]
    dU = res.eval_y[..., 1]
    return _gram_volume(T_grid[:, None], U, dU)


# ---------------------------------------------------------------------------
# connection map and the flow differential
# ---------------------------------------------------------------------------


def gamma_contract(metric, chart, u, a, b):
    """Γ(a, b)^k = Γ^k_ij a^i b^j."""
    gam = metric.christoffel(chart, u)
    return np.einsum("nkij,ni,nj->nk", gam, a, b)


def connection_split(metric, chart, u, v, dx, dv):
    """Coordinate tangent vector (δx, δv) of TM → (horizontal, vertical) = (J, J')."""
    return dx, dv + gamma_contract(metric, chart, u, v, dx)


def connection_join(metric, chart, u, v, J, Jdot):
    """Inverse of :func:`connection_split`."""
    return J, Jdot - gamma_contract(metric, chart, u, v, J)


def sasaki_norm(metric, chart, u, J, Jdot):
    g = metric.metric_tensor(chart, u)
    return np.sqrt(inner(g, J, J) + inner(g, Jdot, Jdot))


def _into_chart(metric, chart, u, v, target, target_u):
    du = metric.displacement(chart, u, target, target_u)
    _, (v2,) = metric.transfer(chart, u, [v], target)
    return du, v2


def flow_differential_check(metric: SurfaceMetric, chart, u, v, xi, T, h=1e-5, tol=1e-12):
    """Compare a central difference of φ_T against the Jacobi prediction.

    Parameters
    ----------
    chart, u, v : batch of unit tangent vectors
    xi : (N, 4) array
        Initial (J_tan, J_norm, J'_tan, J'_norm) of the perturbation.
    T : float
    h : float
        Perturbation size along ξ.

    Returns
    -------
    rel_err : (N,) array
        Sasaki-norm error of the difference quotient relative to |(J(T), J'(T))|.
    """
    chart, u = _as_batch(chart, u)
    v = np.atleast_2d(np.asarray(v, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    N = len(u)
    n0 = metric.unit_normal(chart, u, v)
    J0 = xi[:, 0, None] * v + xi[:, 1, None] * n0
    Jd0 = xi[:, 2, None] * v + xi[:, 3, None] * n0
    dx, dv = connection_join(metric, chart, u, v, J0, Jd0)

    base = np.concatenate([u, v, np.tile([1.0, 0.0, 0.0, 1.0], (N, 1))], axis=1)
    plus = np.concatenate([u + h * dx, v + h * dv], axis=1)
    minus = np.concatenate([u - h * dx, v - h * dv], axis=1)
    r0 = propagate(metric, chart, base, T, n_jacobi=2, rtol=tol, atol=tol * 1e-2)
    rp = propagate(metric, chart, plus, T, rtol=tol, atol=tol * 1e-2)
    rm = propagate(metric, chart, minus, T, rtol=tol, atol=tol * 1e-2)

    c1, u1, v1 = r0.chart, r0.y[:, 0:2], r0.y[:, 2:4]
    dup, vp = _into_chart(metric, rp.chart, rp.y[:, 0:2], rp.y[:, 2:4], c1, u1)
    dum, vm = _into_chart(metric, rm.chart, rm.y[:, 0:2], rm.y[:, 2:4], c1, u1)
    fd_dx = (dup - dum) / (2 * h)
    fd_dv = (vp - vm) / (2 * h)
    fd_J, fd_Jd = connection_split(metric, c1, u1, v1, fd_dx, fd_dv)

    xiT, etaT = r0.y[:, 4:6], r0.y[:, 6:8]
    Jn = xi[:, 1] * xiT[:, 0] + xi[:, 3] * etaT[:, 0]
    Jdn = xi[:, 1] * xiT[:, 1] + xi[:, 3] * etaT[:, 1]
    Jt = xi[:, 0] + T * xi[:, 2]
    n1 = metric.unit_normal(c1, u1, v1)
    J = Jt[:, None] * v1 + Jn[:, None] * n1
    Jd = xi[:, 2, None] * v1 + Jdn[:, None] * n1

    err = sasaki_norm(metric, c1, u1, fd_J - J, fd_Jd - Jd)
    return err / sasaki_norm(metric, c1, u1, J, Jd)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

ARC_CSV_HEADER = ["t", "chart", "u", "v", "u_dot", "v_dot", "x", "y", "z"]


def write_arc_csv(arc: GeodesicArc, path):
    amb = arc.ambient()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ARC_CSV_HEADER)
        for i, t in enumerate(arc.t):
            xyz = [repr(float(a)) for a in amb[i]] if amb is not None else ["", "", ""]
            w.writerow([repr(float(t)), int(arc.chart[i])] + [repr(float(a)) for a in arc.states[i]] + xyz)
