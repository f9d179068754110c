"""Analytic Riemannian metrics on closed surfaces.

Every metric works on batches: ``chart`` is an integer array of shape (N,)
and ``u`` holds chart coordinates with shape (N, 2).  Christoffel symbols are
returned as ``gamma[n, k, i, j]`` = Γ^k_ij.

Built-in kinds
--------------
round-sphere, ellipsoid, paternain
    Quadric ``x²/a1 + y²/a2 + z²/a3 = 1`` (semi-axes √a_i) covered by two
    stereographic charts centred on the poles of the local z axis.  The
    paternain kind multiplies the induced metric by the conformal factor
    ``(1 - ε r·X) / (a1 a2 a3 Σ X_i²/a_i²)``.
flat-torus
    R² / B Z² with the Euclidean metric, B the lattice basis (columns).
custom
    A single rectangular chart with user coefficient functions E, F, G taken
    from a named registry; derivatives by central differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from ._kernels import KIND_QUADRIC, KIND_TORUS, quadric_terms
from .errors import (
    BoundaryProximityError,
    InvalidMetricError,
    NonPositiveDefiniteError,
    PointOutsideChartError,
)

CHART_RADIUS = 2.0
SWITCH_RADIUS = 0.8 * CHART_RADIUS

# sign patterns turning the base stereographic map into positively oriented charts
_CHART_SIGNS = np.array([[1.0, -1.0, 1.0], [1.0, 1.0, -1.0]])


@dataclass(frozen=True)
class SurfacePoint:
    chart: int
    coords: np.ndarray
    ambient: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float).reshape(2))
        if self.ambient is not None:
            object.__setattr__(self, "ambient", np.asarray(self.ambient, dtype=float))


def _as_batch(chart, u):
    u = np.atleast_2d(np.asarray(u, dtype=float))
    chart = np.broadcast_to(np.asarray(chart, dtype=int), u.shape[:1]).copy()
    return chart, u


def rotate90(g, v):
    """Rotate tangent vectors by +90° with respect to the metric ``g``.

    The result has the same g-length as ``v`` and the orientation of the chart.
    """
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] ** 2
    s = 1.0 / np.sqrt(det)
    n0 = -(g[..., 0, 1] * v[..., 0] + g[..., 1, 1] * v[..., 1]) * s
    n1 = (g[..., 0, 0] * v[..., 0] + g[..., 0, 1] * v[..., 1]) * s
    return np.stack([n0, n1], axis=-1)


def inner(g, a, b):
    return np.einsum("...i,...ij,...j->...", a, g, b)


class SurfaceMetric:
    """Common interface of all surface metrics.

    Subclasses implement the batched primitives; the module-level functions
    :func:`metric_eval`, :func:`christoffel` and :func:`gauss_curvature`
    are the single-point entry points.
    """

    kind: str = "abstract"
    n_charts: int = 1
    length_scale: float = 1.0
    # longest arc a single integrator step may cover (keeps steps inside a chart)
    max_step_length: float | None = None
    # per-dimension period of the locator coordinates (inf = not periodic)
    locator_period: np.ndarray | None = None

    # -- batched primitives -------------------------------------------------
    def metric_tensor(self, chart, u):
        raise NotImplementedError

    def christoffel(self, chart, u):
        raise NotImplementedError

    def curvature(self, chart, u):
        raise NotImplementedError

    def compiled_params(self):
        """Parameters for the compiled integrator, or None if unsupported."""
        return None

    def geodesic_terms(self, chart, u, v, need_curvature=False):
        """Return (acceleration, g(v, v), K or None) for the geodesic ODE."""
        g = self.metric_tensor(chart, u)
        gam = self.christoffel(chart, u)
        acc = -np.einsum("nkij,ni,nj->nk", gam, v, v)
        gvv = inner(g, v, v)
        K = self.curvature(chart, u) if need_curvature else None
        return acc, gvv, K

    def needs_switch(self, chart, u):
        return np.zeros(len(u), dtype=bool)

    def switch(self, chart, u, v):
        return chart, u, v

    def transfer(self, chart, u, vecs, target):
        """Express points (and tangent vectors at them) in ``target`` charts."""
        return u, vecs

    def displacement(self, chart, u, target, target_u):
        """Coordinate offset of (chart, u) from (target, target_u), in the target chart."""
        u2, _ = self.transfer(chart, u, [], target)
        return u2 - target_u

    def locate(self, chart, u):
        raise NotImplementedError

    def velocity_locator(self, chart, u, v):
        raise NotImplementedError

    def in_domain(self, chart, u):
        raise NotImplementedError

    def sample_points(self, n, rng, qmc_seed=None):
        raise NotImplementedError

    def area(self):
        raise NotImplementedError

    def describe(self) -> dict:
        raise NotImplementedError

    # -- conveniences -------------------------------------------------------
    def diameter_estimate(self) -> float:
        """Rough intrinsic diameter; sets default tolerances in metric units."""
        return math.pi * self.length_scale

    def frame(self, chart, u):
        """Positively oriented g-orthonormal frame (e1, e2) with e1 ∥ ∂/∂u1."""
        g = self.metric_tensor(chart, u)
        e1 = np.zeros_like(u)
        e1[:, 0] = 1.0 / np.sqrt(g[:, 0, 0])
        return e1, rotate90(g, e1)

    def unit_normal(self, chart, u, v):
        g = self.metric_tensor(chart, u)
        n = rotate90(g, v)
        return n / np.sqrt(inner(g, n, n))[:, None]

    def point(self, coords, chart=0) -> SurfacePoint:
        c, uu = _as_batch(chart, coords)
        if not self.in_domain(c, uu)[0]:
            raise PointOutsideChartError(f"coords {uu[0]} outside chart {chart}")
        amb = self.embed(c, uu)
        return SurfacePoint(int(c[0]), uu[0], None if amb is None else amb[0])

    def embed(self, chart, u):
        return None

    def _check_point(self, p: SurfacePoint):
        c, u = _as_batch(p.chart, p.coords)
        if not (0 <= p.chart < self.n_charts) or not self.in_domain(c, u)[0]:
            raise PointOutsideChartError(f"point {p.coords} outside chart {p.chart} of {self.kind}")
        return c, u

    def check_positive_definite(self, chart, u):
        g = self.metric_tensor(chart, u)
        det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] * g[:, 1, 0]
        bad = ~((det > 0) & (g[:, 0, 0] > 0))
        if np.any(bad):
            i = int(np.argmax(bad))
            raise NonPositiveDefiniteError(
                f"{self.kind} metric is not positive definite at chart {chart[i]}, coords {u[i]}"
            )
        return g


# ---------------------------------------------------------------------------
# quadric family
# ---------------------------------------------------------------------------


def _stereo_base(u):
    """b(u) = (2u1, 2u2, |u|² - 1) / (|u|² + 1) with first and second derivatives."""
    u1, u2 = u[:, 0], u[:, 1]
    q = 1.0 + u1 * u1 + u2 * u2
    f = 1.0 / q
    df = np.stack([-2 * u1 * f * f, -2 * u2 * f * f], axis=-1)  # (N,2)
    eye = np.eye(2)
    d2f = -2 * eye[None] * (f * f)[:, None, None] + 8 * np.einsum("ni,nj->nij", u, u) * (f**3)[:, None, None]
    b = np.stack([2 * u1 * f, 2 * u2 * f, 1 - 2 * f], axis=-1)
    db = np.empty((len(u), 3, 2))
    d2b = np.empty((len(u), 3, 2, 2))
    for a in range(2):
        # b_a = 2 u_a f
        db[:, a, :] = 2 * u[:, a, None] * df
        db[:, a, a] += 2 * f
        d2b[:, a] = 2 * u[:, a, None, None] * d2f
        d2b[:, a, a, :] += 2 * df
        d2b[:, a, :, a] += 2 * df
    db[:, 2, :] = -2 * df
    d2b[:, 2] = -2 * d2f
    return b, db, d2b


class QuadricMetric(SurfaceMetric):
    """Sphere, ellipsoid and the conformal paternain deformation of the ellipsoid."""

    n_charts = 2

    def __init__(self, kind, axes, rotation=None, eps=0.0, r=(0.0, 0.0, 0.0), conformal=False):
        axes = np.asarray(axes, dtype=float)
        if axes.shape != (3,) or np.any(axes <= 0):
            raise InvalidMetricError("quadric axes must be three positive numbers")
        self.kind = kind
        self.axes = axes
        self.semi = np.sqrt(axes)
        self.rotation = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-12):
            raise InvalidMetricError("chart rotation must be orthogonal")
        if np.linalg.det(self.rotation) < 0:
            raise InvalidMetricError("chart rotation must preserve orientation")
        self.eps = float(eps)
        self.r = np.asarray(r, dtype=float)
        self.conformal = bool(conformal)
        if self.conformal:
            # max of r·X over the quadric is sqrt(Σ a_i r_i²)
            reach = math.sqrt(float(np.sum(self.axes * self.r**2)))
            if abs(self.eps) * reach >= 1.0:
                raise NonPositiveDefiniteError(
                    f"paternain factor 1 - eps r.X changes sign (|eps| * {reach:.4g} >= 1)"
                )
        self.length_scale = float(self.semi.max())
        self.max_step_length = 0.25 * float(self.semi.min())
        self._area = None
        self._rho_max = None

    # ambient geometry --------------------------------------------------
    def _sphere(self, chart, u, order=2):
        b, db, d2b = _stereo_base(u)
        c = _CHART_SIGNS[chart]
        s = c * b
        ds = c[:, :, None] * db
        d2s = c[:, :, None, None] * d2b
        return s, ds, d2s

    def _lift(self, chart, u):
        s, ds, d2s = self._sphere(chart, u)
        R, A = self.rotation, self.semi
        X = (s @ R.T) * A
        Xd = np.einsum("ab,nbi->nai", R, ds) * A[None, :, None]
        Xdd = np.einsum("ab,nbij->naij", R, d2s) * A[None, :, None, None]
        return X, Xd, Xdd

    def embed(self, chart, u):
        chart, u = _as_batch(chart, u)
        s, _, _ = self._sphere(chart, u)
        return (s @ self.rotation.T) * self.semi

    def conformal_factor(self, X):
        """Paternain factor evaluated at ambient points (1 for plain quadrics)."""
        X = np.atleast_2d(X)
        if not self.conformal:
            return np.ones(len(X))
        a = self.axes
        Q = np.sum(X**2 / a**2, axis=-1)
        return (1.0 - self.eps * (X @ self.r)) / (np.prod(a) * Q)

    def _log_factor_derivs(self, X):
        a = self.axes
        Q = np.sum(X**2 / a**2, axis=-1)
        lin = 1.0 - self.eps * (X @ self.r)
        gQ = 2 * X / a**2
        grad = -self.eps * self.r[None, :] / lin[:, None] - gQ / Q[:, None]
        hess = (
            -(self.eps**2) * np.outer(self.r, self.r)[None] / (lin**2)[:, None, None]
            - 2 * np.diag(1 / a**2)[None] / Q[:, None, None]
            + np.einsum("ni,nj->nij", gQ, gQ) / (Q**2)[:, None, None]
        )
        return grad, hess

    def _induced(self, chart, u):
        X, Xd, Xdd = self._lift(chart, u)
        g = np.einsum("nai,naj->nij", Xd, Xd)
        return X, Xd, Xdd, g

    def metric_tensor(self, chart, u):
        X, Xd, _, g = self._induced(chart, u)
        if self.conformal:
            g = g * self.conformal_factor(X)[:, None, None]
        return g

    def _christoffel_from(self, X, Xd, Xdd, g):
        ginv = np.linalg.inv(g)
        h = np.einsum("nal,naij->nlij", Xd, Xdd)
        gam = np.einsum("nkl,nlij->nkij", ginv, h)
        if self.conformal:
            grad, _ = self._log_factor_derivs(X)
            d = np.einsum("na,nai->ni", grad, Xd)  # ∂_i log λ
            eye = np.eye(2)
            up = np.einsum("nkl,nl->nk", ginv, d)
            gam = gam + 0.5 * (
                np.einsum("ki,nj->nkij", eye, d)
                + np.einsum("kj,ni->nkij", eye, d)
                - np.einsum("nij,nk->nkij", g, up)
            )
        return gam

    def christoffel(self, chart, u):
        X, Xd, Xdd, g = self._induced(chart, u)
        return self._christoffel_from(X, Xd, Xdd, g)

    def quadric_curvature(self, X):
        """Gaussian curvature of the induced (unscaled) quadric metric at ambient X."""
        a = self.axes
        Q = np.sum(X**2 / a**2, axis=-1)
        return 1.0 / (np.prod(a) * Q**2)

    def _curvature_at(self, X):
        KE = self.quadric_curvature(X)
        if not self.conformal:
            return KE
        a = self.axes
        grad, hess = self._log_factor_derivs(X)
        gF = 2 * X / a
        nrm = np.linalg.norm(gF, axis=-1)
        nvec = gF / nrm[:, None]
        HF_tr = np.sum(2 / a) - np.einsum("ni,i,ni->n", nvec, 2 / a, nvec)
        kappa = HF_tr / nrm
        lap = (
            np.trace(hess, axis1=1, axis2=2)
            - np.einsum("ni,nij,nj->n", nvec, hess, nvec)
            - np.einsum("ni,ni->n", grad, nvec) * kappa
        )
        return (KE - 0.5 * lap) / self.conformal_factor(X)

    def curvature(self, chart, u):
        return self._curvature_at(self.embed(chart, u))

    def compiled_params(self):
        return dict(kind=KIND_QUADRIC, semi=self.semi, axes=self.axes, R=self.rotation,
                    conformal=self.conformal, eps=self.eps, r=self.r,
                    basis=np.eye(2), basis_inv=np.eye(2))

    def geodesic_terms(self, chart, u, v, need_curvature=False):
        n = len(u)
        acc = np.empty((n, 2))
        gvv = np.empty(n)
        K = np.empty(n) if need_curvature else np.empty(0)
        quadric_terms(
            np.ascontiguousarray(chart, dtype=np.int64),
            np.ascontiguousarray(u),
            np.ascontiguousarray(v),
            self.semi,
            self.axes,
            self.rotation,
            self.conformal,
            self.eps,
            self.r,
            need_curvature,
            acc,
            gvv,
            K,
        )
        return acc, gvv, (K if need_curvature else None)

    # charts ----------------------------------------------------------------
    def in_domain(self, chart, u):
        return np.sum(u * u, axis=-1) <= CHART_RADIUS**2 * (1 + 1e-12)

    def needs_switch(self, chart, u):
        return np.sum(u * u, axis=-1) > SWITCH_RADIUS**2

    @staticmethod
    def _chart_of(s_local):
        return np.where(s_local[:, 2] <= 0, 0, 1)

    @staticmethod
    def _coords_of(chart, s_local):
        b = s_local * _CHART_SIGNS[chart]
        return b[:, :2] / (1.0 - b[:, 2])[:, None]

    def transfer(self, chart, u, vecs, target):
        chart, u = _as_batch(chart, u)
        target = np.broadcast_to(np.asarray(target, dtype=int), chart.shape)
        s, ds, _ = self._sphere(chart, u)
        u2 = self._coords_of(target, s)
        if not vecs:
            return u2, []
        _, ds2, _ = self._sphere(target, u2)
        gram_inv = np.linalg.inv(np.einsum("nai,naj->nij", ds2, ds2))
        out = []
        for w in vecs:
            amb = np.einsum("nai,ni->na", ds, w)
            out.append(np.einsum("nij,naj,na->ni", gram_inv, ds2, amb))
        return u2, out

    def switch(self, chart, u, v):
        target = 1 - chart
        u2, (v2,) = self.transfer(chart, u, [v], target)
        return target, u2, v2

    def locate(self, chart, u):
        return self.embed(chart, u)

    def velocity_locator(self, chart, u, v):
        _, Xd, _ = self._lift(chart, u)
        return np.einsum("nai,ni->na", Xd, v)

    def point_from_ambient(self, X) -> SurfacePoint:
        X = np.asarray(X, dtype=float).reshape(1, 3)
        if abs(float(np.sum(X**2 / self.axes)) - 1.0) > 1e-10:
            raise PointOutsideChartError("ambient point is not on the quadric")
        s = (X / self.semi) @ self.rotation
        c = self._chart_of(s)
        u = self._coords_of(c, s)
        return SurfacePoint(int(c[0]), u[0], X[0])

    def chart_coords_from_sphere(self, s_world):
        s_local = np.atleast_2d(s_world) @ self.rotation
        c = self._chart_of(s_local)
        return c, self._coords_of(c, s_local)

    # measure ---------------------------------------------------------------
    def _density(self, s):
        """Area density of the surface relative to the unit sphere parameter."""
        A = self.semi
        X = s * A
        rho = np.prod(A) * np.linalg.norm(s / A, axis=-1)
        return rho * self.conformal_factor(X)

    def _quadrature(self):
        if self._area is None:
            xt, wt = np.polynomial.legendre.leggauss(160)
            th = 0.5 * math.pi * (xt + 1)
            wt = 0.5 * math.pi * wt
            ph = np.linspace(0, 2 * math.pi, 320, endpoint=False)
            T, P = np.meshgrid(th, ph, indexing="ij")
            s = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1).reshape(-1, 3)
            rho = self._density(s).reshape(T.shape)
            self._area = float(np.sum(rho * np.sin(T) * wt[:, None]) * (2 * math.pi / len(ph)))
            self._rho_max = float(rho.max()) * 1.05
        return self._area, self._rho_max

    def area(self):
        return self._quadrature()[0]

    def _is_uniform(self):
        return not self.conformal and np.allclose(self.axes, self.axes[0])

    def sample_points(self, n, rng, qmc_seed=None):
        """Area-distributed points: uniform sphere proposals, rejection on the density."""
        _, rho_max = self._quadrature()
        uniform = self._is_uniform()
        sampler = None
        if qmc_seed is not None:
            sampler = qmc.Sobol(d=2 if uniform else 3, scramble=True, seed=qmc_seed)
        out = []
        have = 0
        while have < n:
            m = max(64, 2 * (n - have))
            m = 1 << int(math.ceil(math.log2(m)))
            w = sampler.random(m) if sampler is not None else rng.random((m, 2 if uniform else 3))
            z = 2 * w[:, 0] - 1
            ph = 2 * math.pi * w[:, 1]
            rr = np.sqrt(np.clip(1 - z * z, 0, None))
            s = np.stack([rr * np.cos(ph), rr * np.sin(ph), z], -1)
            if not uniform:
                s = s[w[:, 2] * rho_max < self._density(s)]
            out.append(s)
            have += len(s)
        s = np.concatenate(out)[:n]
        return self.chart_coords_from_sphere(s)

    def describe(self):
        d = {"kind": self.kind}
        if self.kind == "round-sphere":
            d["params"] = {"radius": float(self.semi[0])}
        else:
            d["params"] = {"a": self.axes.tolist()}
            if self.kind == "paternain":
                d["params"].update(eps=self.eps, r=self.r.tolist())
        if not np.allclose(self.rotation, np.eye(3)):
            d["params"]["rotation"] = self.rotation.tolist()
        return d


def round_sphere(radius=1.0, rotation=None) -> QuadricMetric:
    if radius <= 0:
        raise InvalidMetricError("radius must be positive")
    return QuadricMetric("round-sphere", [radius**2] * 3, rotation)


def ellipsoid(a1, a2, a3, rotation=None) -> QuadricMetric:
    if not 0 < a1 < a2 < a3:
        raise InvalidMetricError("ellipsoid requires 0 < a1 < a2 < a3")
    return QuadricMetric("ellipsoid", [a1, a2, a3], rotation)


def paternain(a1, a2, a3, eps, r=(1.0, 1.0, 1.0), rotation=None) -> QuadricMetric:
    if not 0 < a1 < a2 < a3:
        raise InvalidMetricError("paternain metric requires 0 < a1 < a2 < a3")
    return QuadricMetric("paternain", [a1, a2, a3], rotation, eps=eps, r=r, conformal=True)


# ---------------------------------------------------------------------------
# flat torus
# ---------------------------------------------------------------------------


class FlatTorus(SurfaceMetric):
    kind = "flat-torus"

    def __init__(self, basis=None):
        B = np.eye(2) if basis is None else np.asarray(basis, dtype=float)
        if B.shape != (2, 2) or abs(np.linalg.det(B)) < 1e-12:
            raise InvalidMetricError("lattice basis must be an invertible 2x2 matrix")
        self.basis = B
        self.basis_inv = np.linalg.inv(B)
        self.length_scale = math.sqrt(abs(np.linalg.det(B)))
        self.locator_period = np.array([1.0, 1.0])

    def _frac(self, u):
        return u @ self.basis_inv.T

    def diameter_estimate(self):
        b1, b2 = self.basis[:, 0], self.basis[:, 1]
        return 0.5 * max(np.linalg.norm(b1 + b2), np.linalg.norm(b1 - b2))

    def metric_tensor(self, chart, u):
        return np.broadcast_to(np.eye(2), (len(u), 2, 2)).copy()

    def christoffel(self, chart, u):
        return np.zeros((len(u), 2, 2, 2))

    def curvature(self, chart, u):
        return np.zeros(len(u))

    def compiled_params(self):
        z = np.zeros(3)
        return dict(kind=KIND_TORUS, semi=z, axes=z + 1.0, R=np.eye(3), conformal=False,
                    eps=0.0, r=z, basis=self.basis, basis_inv=self.basis_inv)

    def geodesic_terms(self, chart, u, v, need_curvature=False):
        K = np.zeros(len(u)) if need_curvature else None
        return np.zeros_like(v), np.sum(v * v, axis=-1), K

    def in_domain(self, chart, u):
        f = self._frac(u)
        return np.all((f >= -0.5) & (f < 1.5), axis=-1)

    def needs_switch(self, chart, u):
        f = self._frac(u)
        return np.any((f < -0.25) | (f >= 1.25), axis=-1)

    def switch(self, chart, u, v):
        f = self._frac(u)
        return chart, (f - np.floor(f)) @ self.basis.T, v

    def displacement(self, chart, u, target, target_u):
        f = self._frac(u - target_u)
        f -= np.round(f)
        return f @ self.basis.T

    def locate(self, chart, u):
        f = self._frac(u)
        return f - np.floor(f)

    def velocity_locator(self, chart, u, v):
        return np.array(v, dtype=float)

    def sample_points(self, n, rng, qmc_seed=None):
        if qmc_seed is not None:
            m = 1 << int(math.ceil(math.log2(max(n, 2))))
            f = qmc.Sobol(d=2, scramble=True, seed=qmc_seed).random(m)[:n]
        else:
            f = rng.random((n, 2))
        return np.zeros(n, dtype=int), f @ self.basis.T

    def area(self):
        return abs(float(np.linalg.det(self.basis)))

    def describe(self):
        return {"kind": self.kind, "params": {"basis": self.basis.tolist()}}


def flat_torus(basis=None) -> FlatTorus:
    return FlatTorus(basis)


# ---------------------------------------------------------------------------
# custom metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CustomEntry:
    E: Callable
    F: Callable
    G: Callable
    domain: tuple
    periodic: tuple = (False, False)


CUSTOM_REGISTRY: dict[str, CustomEntry] = {}


def register_custom_metric(name, E, F, G, domain, periodic=(False, False)):
    """Register chart coefficient functions under ``name``.

    E, F and G must accept two numpy arrays and broadcast like ufuncs.
    Analyticity is the caller's promise; nothing here checks it.
    """
    CUSTOM_REGISTRY[name] = CustomEntry(E, F, G, tuple(map(tuple, domain)), tuple(periodic))


def _const(c):
    return lambda a, b: np.full(np.broadcast(a, b).shape, c, dtype=float)


register_custom_metric(
    "sphere-spherical",
    _const(1.0),
    _const(0.0),
    lambda th, ph: np.sin(th) ** 2 + 0 * ph,
    domain=((0.05, math.pi - 0.05), (0.0, 2 * math.pi)),
    periodic=(False, True),
)
register_custom_metric(
    "flat-square",
    _const(1.0),
    _const(0.0),
    _const(1.0),
    domain=((0.0, 1.0), (0.0, 1.0)),
    periodic=(True, True),
)


class CustomMetric(SurfaceMetric):
    """Single-chart metric from registered coefficient functions.

    Christoffel symbols use central differences with step 1e-5 × diameter and
    one Richardson level; curvature differentiates those symbols again with a
    coarser step (1e-3 × diameter), since nested differences at the fine step
    would be dominated by roundoff.
    """

    kind = "custom"

    def __init__(self, name, entry: CustomEntry | None = None):
        if entry is None:
            if name not in CUSTOM_REGISTRY:
                raise InvalidMetricError(f"no custom metric registered under {name!r}")
            entry = CUSTOM_REGISTRY[name]
        self.name = name
        self.entry = entry
        lo = np.array([d[0] for d in entry.domain], dtype=float)
        hi = np.array([d[1] for d in entry.domain], dtype=float)
        if np.any(hi <= lo):
            raise InvalidMetricError("custom chart domain must be a non-empty rectangle")
        self.lo, self.hi = lo, hi
        self.periodic = np.array(entry.periodic, dtype=bool)
        self.diameter = float(np.hypot(*(hi - lo)))
        self.h = 1e-5 * self.diameter
        self.h_curv = 1e-3 * self.diameter
        self.length_scale = self.diameter
        self.max_step_length = 0.1 * self.diameter
        self.locator_period = np.where(self.periodic, hi - lo, np.inf)
        self._area = None
        self._rho_max = None
        # positivity over a sample grid of the chart
        t = np.linspace(0.02, 0.98, 24)
        P = np.stack(np.meshgrid(t, t, indexing="ij"), -1).reshape(-1, 2)
        U = lo + P * (hi - lo)
        self.check_positive_definite(np.zeros(len(U), dtype=int), U)

    def metric_tensor(self, chart, u):
        a, b = u[:, 0], u[:, 1]
        E = np.asarray(self.entry.E(a, b), dtype=float)
        F = np.asarray(self.entry.F(a, b), dtype=float)
        G = np.asarray(self.entry.G(a, b), dtype=float)
        return np.stack([np.stack([E, F], -1), np.stack([F, G], -1)], -2)

    def _require_margin(self, u, margin):
        inner_lo = self.lo + margin
        inner_hi = self.hi - margin
        bad = ~self.periodic & ((u < inner_lo) | (u > inner_hi))
        if np.any(bad):
            raise BoundaryProximityError(f"point within {margin:.3g} of the {self.name} chart boundary")

    def _dmetric(self, u, h):
        """∂_k g_ij via central differences plus one Richardson level: out[n, k, i, j]."""
        c = np.zeros(len(u), dtype=int)
        out = np.empty((len(u), 2, 2, 2))
        for k in range(2):
            e = np.zeros(2)
            e[k] = 1.0
            d1 = (self.metric_tensor(c, u + h * e) - self.metric_tensor(c, u - h * e)) / (2 * h)
            d2 = (self.metric_tensor(c, u + 0.5 * h * e) - self.metric_tensor(c, u - 0.5 * h * e)) / h
            out[:, k] = (4 * d2 - d1) / 3
        return out

    def _gamma(self, u):
        g = self.metric_tensor(None, u)
        dg = self._dmetric(u, self.h)
        ginv = np.linalg.inv(g)
        # Γ_lij = ½(∂_i g_jl + ∂_j g_il − ∂_l g_ij)
        low = 0.5 * (
            np.einsum("nijl->nlij", dg)
            + np.einsum("njil->nlij", dg)
            - dg
        )
        return np.einsum("nkl,nlij->nkij", ginv, low)

    def christoffel(self, chart, u):
        self._require_margin(u, 2 * self.h)
        return self._gamma(u)

    def curvature(self, chart, u):
        H = self.h_curv
        self._require_margin(u, 2 * H)
        dgam = np.empty((len(u), 2, 2, 2, 2))  # [n, m, k, i, j] = ∂_m Γ^k_ij
        for m in range(2):
            e = np.zeros(2)
            e[m] = 1.0
            d1 = (self._gamma(u + H * e) - self._gamma(u - H * e)) / (2 * H)
            d2 = (self._gamma(u + 0.5 * H * e) - self._gamma(u - 0.5 * H * e)) / H
            dgam[:, m] = (4 * d2 - d1) / 3
        gam = self._gamma(u)
        g = self.metric_tensor(None, u)
        # R(∂1, ∂2)∂2 = R^l_{212} ∂_l
        R = (
            dgam[:, 0, :, 1, 1]
            - dgam[:, 1, :, 0, 1]
            + np.einsum("nlm,nm->nl", gam[:, :, 0, :], gam[:, :, 1, 1])
            - np.einsum("nlm,nm->nl", gam[:, :, 1, :], gam[:, :, 0, 1])
        )
        det = g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2
        return np.einsum("nl,nl->n", g[:, 0, :], R) / det

    def in_domain(self, chart, u):
        ok = (u >= self.lo) & (u <= self.hi)
        return np.all(ok | self.periodic, axis=-1)

    def needs_switch(self, chart, u):
        out = (u < self.lo) | (u >= self.hi)
        return np.any(out & self.periodic, axis=-1)

    def switch(self, chart, u, v):
        w = self.hi - self.lo
        wrapped = self.lo + np.mod(u - self.lo, w)
        return chart, np.where(self.periodic, wrapped, u), v

    def displacement(self, chart, u, target, target_u):
        d = u - target_u
        w = self.hi - self.lo
        return np.where(self.periodic, d - w * np.round(d / w), d)

    def locate(self, chart, u):
        w = self.hi - self.lo
        x = u - self.lo
        return np.where(self.periodic, np.mod(x, w), x)

    def velocity_locator(self, chart, u, v):
        return np.array(v, dtype=float)

    def _quadrature(self):
        if self._area is None:
            x, w = np.polynomial.legendre.leggauss(64)
            a = self.lo[0] + 0.5 * (x + 1) * (self.hi[0] - self.lo[0])
            b = self.lo[1] + 0.5 * (x + 1) * (self.hi[1] - self.lo[1])
            A, B = np.meshgrid(a, b, indexing="ij")
            U = np.stack([A.ravel(), B.ravel()], -1)
            g = self.metric_tensor(None, U)
            rho = np.sqrt(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2).reshape(A.shape)
            jac = 0.25 * np.prod(self.hi - self.lo)
            self._area = float(np.einsum("i,j,ij->", w, w, rho) * jac)
            self._rho_max = float(rho.max()) * 1.1
        return self._area, self._rho_max

    def area(self):
        return self._quadrature()[0]

    def sample_points(self, n, rng, qmc_seed=None):
        _, rho_max = self._quadrature()
        sampler = qmc.Sobol(d=3, scramble=True, seed=qmc_seed) if qmc_seed is not None else None
        out, have = [], 0
        while have < n:
            m = 1 << int(math.ceil(math.log2(max(64, 2 * (n - have)))))
            w = sampler.random(m) if sampler is not None else rng.random((m, 3))
            U = self.lo + w[:, :2] * (self.hi - self.lo)
            g = self.metric_tensor(None, U)
            rho = np.sqrt(g[:, 0, 0] * g[:, 1, 1] - g[:, 0, 1] ** 2)
            U = U[w[:, 2] * rho_max < rho]
            out.append(U)
            have += len(U)
        U = np.concatenate(out)[:n]
        return np.zeros(n, dtype=int), U

    def describe(self):
        return {"kind": "custom", "params": {"name": self.name}}


def custom_metric(name) -> CustomMetric:
    return CustomMetric(name)


# ---------------------------------------------------------------------------
# construction from documents and single-point operations
# ---------------------------------------------------------------------------

DEFAULT_ELLIPSOID_AXES = (1.0, 1.2, 1.4)


def metric_from_dict(doc: dict) -> SurfaceMetric:
    """Build a metric from ``{"kind": ..., "params": {...}}``."""
    if not isinstance(doc, dict) or "kind" not in doc:
        raise InvalidMetricError("metric document needs a 'kind' field")
    kind = doc["kind"]
    p = dict(doc.get("params", {}))
    rot = p.pop("rotation", None)
    if kind in ("round-sphere", "sphere"):
        return round_sphere(float(p.get("radius", 1.0)), rot)
    if kind == "flat-torus" or kind == "torus":
        return flat_torus(p.get("basis"))
    if kind == "ellipsoid":
        return ellipsoid(*p.get("a", DEFAULT_ELLIPSOID_AXES), rotation=rot)
    if kind == "paternain":
        return paternain(
            *p.get("a", DEFAULT_ELLIPSOID_AXES),
            eps=float(p.get("eps", 0.05)),
            r=p.get("r", (1.0, 1.0, 1.0)),
            rotation=rot,
        )
    if kind == "custom":
        if "name" not in p:
            raise InvalidMetricError("custom metrics are referenced by registry name")
        return custom_metric(p["name"])
    raise InvalidMetricError(f"unknown metric kind {kind!r}")


def metric_eval(metric: SurfaceMetric, p: SurfacePoint) -> np.ndarray:
    """Metric tensor at one point; raises unless symmetric positive definite."""
    c, u = metric._check_point(p)
    g = metric.check_positive_definite(c, u)[0]
    return 0.5 * (g + g.T)


def christoffel(metric: SurfaceMetric, p: SurfacePoint) -> np.ndarray:
    """Γ^k_ij at one point as an array indexed [k, i, j]."""
    c, u = metric._check_point(p)
    return metric.christoffel(c, u)[0]


def gauss_curvature(metric: SurfaceMetric, p: SurfacePoint) -> float:
    c, u = metric._check_point(p)
    return float(metric.curvature(c, u)[0])
