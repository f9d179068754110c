"""φ- and f-matrices of the adapted complex structure along a geodesic.

Along a unit-speed geodesic the normal Jacobi equation is u'' + K u = 0.  With
ξ (u(0) = 1, u'(0) = 0) and η (u(0) = 0, u'(0) = 1) the normal entry of the
φ-matrix is η/ξ on the real axis; its meromorphic continuation f is obtained
by integrating the complexified equation along the segment 0 → z.  The
tangential entry is always σ on R and z off it, so f = diag(f_normal, z).

A ``CurvatureProfile`` supplies K at complex arc length: a constant, a named
closed form, or a Chebyshev fit of K sampled along a real geodesic of some
metric (trusted only inside a strip around the fit interval).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import Chebyshev
from scipy.integrate import solve_ivp

from .errors import OutsideValidityStripError, PoleEncounteredError
from .integrate import propagate
from .metrics import SurfaceMetric

ODE_RTOL = 1e-12
ODE_ATOL = 1e-14
POLE_GUARD = 1e-3
FD_STEP = 1e-6

CLOSED_FORMS: dict[str, Callable] = {
    # bump of positive curvature decaying to flat
    "sech2": lambda w: 1.0 / np.cosh(w) ** 2,
    # oscillating curvature of both signs
    "cos": lambda w: np.cos(w),
}


@dataclass(frozen=True)
class CurvatureProfile:
    kind: str  # constant | closed-form | chebyshev-fit
    K: float | None = None
    name: str | None = None
    cheb: Chebyshev | None = field(default=None, repr=False)
    strip: float = np.inf  # half-width |Im w| of trust
    real_range: tuple = (-np.inf, np.inf)
    source: dict | None = None

    def __call__(self, w):
        w = np.asarray(w, dtype=complex)
        if self.kind == "constant":
            return np.full(w.shape, complex(self.K))
        if self.kind == "closed-form":
            return CLOSED_FORMS[self.name](w)
        return self.cheb(w)

    def contains(self, z) -> bool:
        z = np.asarray(z, dtype=complex)
        a, b = self.real_range
        return bool(np.all((np.abs(z.imag) <= self.strip) & (z.real >= a) & (z.real <= b)))

    def describe(self):
        d = {"kind": self.kind, "validity_strip": None if np.isinf(self.strip) else self.strip}
        if self.kind == "constant":
            d["K"] = self.K
        elif self.kind == "closed-form":
            d["name"] = self.name
        else:
            d["degree"] = self.cheb.degree()
            d["real_range"] = list(self.real_range)
        if self.source:
            d["source"] = self.source
        return d


def constant_profile(K: float) -> CurvatureProfile:
    return CurvatureProfile("constant", K=float(K))


def closed_form_profile(name: str) -> CurvatureProfile:
    if name not in CLOSED_FORMS:
        raise KeyError(f"unknown closed-form profile {name!r}; known: {sorted(CLOSED_FORMS)}")
    return CurvatureProfile("closed-form", name=name)


def _curvature_along(metric, chart, u, v, s_nodes):
    """K(γ(s)) at non-negative arc lengths ``s_nodes`` (sorted)."""
    y0 = np.concatenate([u, v])[None]
    res = propagate(metric, [chart], y0, float(s_nodes[-1]), t_eval=s_nodes, record_cols=slice(0, 2))
    return metric.curvature(res.eval_chart[:, 0], res.eval_y[:, 0, :])


def chebyshev_profile(metric: SurfaceMetric, chart, u, v, length, degree=32) -> CurvatureProfile:
    """Chebyshev fit of K along the geodesic γ(s), s ∈ [-length/2, length/2].

    The validity strip half-width is a quarter of the fitted range.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    half = 0.5 * float(length)
    n = 2 * degree + 1
    x = np.cos(np.pi * (np.arange(n) + 0.5) / n) * half
    pos = np.sort(x[x >= 0])
    neg = np.sort(-x[x < 0])
    K = np.empty(n)
    Kp = _curvature_along(metric, chart, u, v, pos)
    Kn = _curvature_along(metric, chart, u, -v, neg)
    xs = np.concatenate([-neg[::-1], pos])
    K = np.concatenate([Kn[::-1], Kp])
    cheb = Chebyshev.fit(xs, K, degree, domain=[-half, half])
    src = {"metric": metric.describe(), "chart": int(chart), "coords": u.tolist(), "velocity": v.tolist()}
    return CurvatureProfile("chebyshev-fit", cheb=cheb, strip=0.5 * half, real_range=(-half, half), source=src)


# ---------------------------------------------------------------------------
# φ along a real geodesic
# ---------------------------------------------------------------------------


@dataclass
class PhiSamples:
    sigma: np.ndarray
    phi: np.ndarray  # (n, 2, 2): diag(φ_normal, σ)
    singular: np.ndarray
    xi: np.ndarray
    eta: np.ndarray

    def as_list(self):
        return list(zip(self.sigma, self.phi, self.singular))


def _fundamental_along(metric, chart, u, v, s):
    y0 = np.concatenate([u, v, [1.0, 0.0, 0.0, 1.0]])[None]
    if len(s) == 0:
        return np.zeros(0), np.zeros(0)
    res = propagate(metric, [chart], y0, float(s[-1]), n_jacobi=2, t_eval=s, record_cols=slice(4, 8))
    return res.eval_y[:, 0, 0], res.eval_y[:, 0, 2]


def phi_along_geodesic(metric: SurfaceMetric, theta, sigma, singular_tol=1e-9) -> PhiSamples:
    """φ-matrix η ξ⁻¹ at the arc lengths ``sigma`` (either sign) along γ_θ."""
    from .flow import check_unit

    c, u = check_unit(metric, theta)
    sigma = np.asarray(sigma, dtype=float)
    order = np.argsort(sigma)
    s = sigma[order]
    xi = np.empty(len(s))
    eta = np.empty(len(s))
    neg = s < 0
    # backwards: reverse the velocity; ξ is even and η odd under s -> -s
    sn = -s[neg][::-1]
    xn, en = _fundamental_along(metric, int(c[0]), u[0], -theta.velocity, sn)
    xi[neg], eta[neg] = xn[::-1], -en[::-1]
    xp, ep = _fundamental_along(metric, int(c[0]), u[0], theta.velocity, s[~neg])
    xi[~neg], eta[~neg] = xp, ep
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    xi, eta = xi[inv], eta[inv]
    singular = np.abs(xi) < singular_tol
    with np.errstate(divide="ignore", invalid="ignore"):
        fn = np.where(singular, np.nan, eta / xi)
    phi = np.zeros((len(sigma), 2, 2))
    phi[:, 0, 0] = fn
    phi[:, 1, 1] = sigma
    return PhiSamples(sigma, phi, singular, xi, eta)


# ---------------------------------------------------------------------------
# complex continuation
# ---------------------------------------------------------------------------


def fundamental_solutions(profile: CurvatureProfile, z, n_out=None):
    """ξ, η and their w-derivatives at the points z (any shape).

    Integrates d²u/ds² = -z² K(s z) u for s ∈ [0, 1] for all points at once.
    With ``n_out`` the values along the path are also returned.
    """
    z = np.asarray(z, dtype=complex)
    shape = z.shape
    zf = z.ravel()
    n = len(zf)
    if not profile.contains(zf):
        raise OutsideValidityStripError(
            f"point outside the validity strip |Im w| <= {profile.strip:g}, Re w in {profile.real_range}"
        )
    # state: ξ, ξ_s, η, η_s
    y0 = np.concatenate([np.ones(n), np.zeros(n), np.zeros(n), zf]).astype(complex)
    z2 = zf * zf

    def rhs(s, y):
        Kz = profile(s * zf)
        out = np.empty_like(y)
        out[0:n] = y[n:2 * n]
        out[n:2 * n] = -z2 * Kz * y[0:n]
        out[2 * n:3 * n] = y[3 * n:4 * n]
        out[3 * n:4 * n] = -z2 * Kz * y[2 * n:3 * n]
        return out

    t_eval = None if n_out is None else np.linspace(0.0, 1.0, n_out)
    sol = solve_ivp(rhs, (0.0, 1.0), y0, method="DOP853", rtol=ODE_RTOL, atol=ODE_ATOL, t_eval=t_eval)
    Y = sol.y[:, -1]
    with np.errstate(divide="ignore", invalid="ignore"):
        dxi = np.where(zf != 0, Y[n:2 * n] / zf, 0.0)
        deta = np.where(zf != 0, Y[3 * n:4 * n] / zf, 1.0)
    out = (Y[0:n].reshape(shape), dxi.reshape(shape), Y[2 * n:3 * n].reshape(shape), deta.reshape(shape))
    if n_out is None:
        return out
    return out, sol


@dataclass
class FSample:
    z: complex
    f: np.ndarray  # 2×2 complex, diag(f_normal, z)
    im_f_min_eigenvalue: float

    @property
    def f_normal(self):
        return self.f[0, 0]


def _min_eig_im(fn, z):
    # Im f = diag(Im f_normal, Im z)
    return np.minimum(fn.imag, np.asarray(z).imag)


def f_normal(profile: CurvatureProfile, z, pole_tol=1e-12):
    """Normal entry η/ξ of f at the points z; raises at poles."""
    xi, _, eta, _ = fundamental_solutions(profile, z)
    small = np.abs(xi) <= pole_tol * np.maximum(1.0, np.abs(eta))
    if np.any(small):
        raise PoleEncounteredError(f"f has a pole at or near z = {np.asarray(z).ravel()[np.argmax(small.ravel())]}")
    return eta / xi


def f_matrix(profile: CurvatureProfile, z: complex) -> FSample:
    z = complex(z)
    fn = complex(f_normal(profile, np.array([z]))[0])
    f = np.array([[fn, 0.0], [0.0, z]], dtype=complex)
    return FSample(z, f, float(_min_eig_im(np.array(fn), z)))


def f_grid(profile: CurvatureProfile, sigma, tau):
    """f_normal on the grid σ × τ, shape (len(σ), len(τ)); NaN at poles."""
    S, Tt = np.meshgrid(np.asarray(sigma, dtype=float), np.asarray(tau, dtype=float), indexing="ij")
    Z = S + 1j * Tt
    xi, _, eta, _ = fundamental_solutions(profile, Z)
    pole = np.abs(xi) <= 1e-12 * np.maximum(1.0, np.abs(eta))
    with np.errstate(divide="ignore", invalid="ignore"):
        fn = np.where(pole, np.nan + 0j, eta / xi)
    return Z, fn


def wronskian_along(profile: CurvatureProfile, z, n_out=64):
    """ξ η' - η ξ' (w-derivatives) at n_out points of the segment 0 → z."""
    z = complex(z)
    _, sol = fundamental_solutions(profile, np.array([z]), n_out=n_out)
    xi, dxi_s, eta, deta_s = sol.y
    if z == 0:
        return np.ones(n_out, dtype=complex)
    return (xi * deta_s - eta * dxi_s) / z


def real_poles(profile: CurvatureProfile, a, b, n=2001):
    """Zeros of ξ on [a, b] (real poles of f_normal), located by sign change and refined."""
    s = np.linspace(a, b, n)
    xi = fundamental_solutions(profile, s.astype(complex))[0].real
    idx = np.nonzero(np.sign(xi[1:]) != np.sign(xi[:-1]))[0]
    poles = []
    for i in idx:
        lo, hi, flo = s[i], s[i + 1], xi[i]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = fundamental_solutions(profile, np.array([mid + 0j]))[0].real[0]
            if np.sign(fm) == np.sign(flo):
                lo, flo = mid, fm
            else:
                hi = mid
            if hi - lo < 1e-13:
                break
        poles.append(0.5 * (lo + hi))
    return np.array(poles)


# ---------------------------------------------------------------------------
# verification and the tube probe
# ---------------------------------------------------------------------------


def _sigma_samples(profile, sigma, guard=POLE_GUARD):
    sigma = np.asarray(sigma, dtype=float)
    poles = real_poles(profile, sigma.min() - guard, sigma.max() + guard)
    if len(poles) == 0:
        return sigma, poles
    near = np.min(np.abs(sigma[:, None] - poles[None, :]), axis=1) < guard
    return sigma[~near], poles


def verify_theorem_mero(profile: CurvatureProfile, sigma, tau) -> dict:
    """Check f(0) = 0, f'(0) = Id, symmetry and Im f > 0 on the grid σ × τ (τ > 0)."""
    f0 = f_matrix(profile, 0.0).f
    h = FD_STEP
    fp = (f_matrix(profile, h).f - f_matrix(profile, -h).f) / (2 * h)
    d_f0 = float(np.max(np.abs(f0)))
    d_fp = float(np.max(np.abs(fp - np.eye(2))))

    sig, poles = _sigma_samples(profile, sigma)
    tau = np.asarray(tau, dtype=float)
    tau = tau[tau > 0]
    Z, fn = f_grid(profile, sig, tau)
    F = np.zeros(Z.shape + (2, 2), dtype=complex)
    F[..., 0, 0] = fn
    F[..., 1, 1] = Z
    asym = float(np.nanmax(np.abs(F - np.swapaxes(F, -1, -2))))
    mins = _min_eig_im(fn, Z)
    finite = np.isfinite(mins)
    worst = float(np.min(mins[finite])) if np.any(finite) else float("nan")
    iw = np.unravel_index(np.argmin(np.where(finite, mins, np.inf)), mins.shape)
    report = {
        "profile": profile.describe(),
        "grid": {"sigma": [float(sig.min()), float(sig.max()), int(len(sig))],
                 "tau": [float(tau.min()), float(tau.max()), int(len(tau))],
                 "excluded_real_poles": poles.tolist(), "guard": POLE_GUARD},
        "f_at_0": {"pass": d_f0 <= 1e-6, "max_abs": d_f0},
        "derivative_at_0": {"pass": d_fp <= 1e-6, "max_error": d_fp, "step": h},
        "symmetric": {"pass": asym == 0.0, "max_asymmetry": asym},
        "im_positive_definite": {
            "pass": bool(np.all(mins[finite] > 0)) and bool(np.all(finite)),
            "min_eigenvalue": worst,
            "at": [float(Z[iw].real), float(Z[iw].imag)],
            "poles_on_grid": int(np.sum(~finite)),
        },
    }
    # e = (Im f(i))^-1 and Re f(i) determine the complex structure on the leaf
    if profile.contains(1j):
        try:
            fi = f_matrix(profile, 1j).f
            report["at_i"] = {"re_f": fi.real.tolist(), "e": np.linalg.inv(fi.imag).tolist()}
        except (PoleEncounteredError, np.linalg.LinAlgError):
            report["at_i"] = None
    report["pass"] = all(report[k]["pass"] for k in ("f_at_0", "derivative_at_0", "symmetric", "im_positive_definite"))
    return report


@dataclass
class TubeProbe:
    radius: float | None
    tau_max: float
    profile: dict

    @property
    def entire_up_to_max(self):
        return self.radius is None

    def __str__(self):
        return f"≥ {self.tau_max:g}" if self.radius is None else f"{self.radius:.6f}"

    def to_dict(self):
        return {"radius": self.radius, "tau_max": self.tau_max, "report": str(self),
                "lower_bound_only": self.radius is None, "profile": self.profile}


def _min_over_sigma(profile, sig, tau):
    """min over σ of min-eig Im f(σ + iτ); -inf if a pole is hit."""
    Z, fn = f_grid(profile, sig, np.atleast_1d(tau))
    m = _min_eig_im(fn, Z)
    m = np.where(np.isfinite(m), m, -np.inf)
    return m.min(axis=0)


def tube_radius_probe(profile: CurvatureProfile, tau_max, tau_steps=100, sigma=None, tol=1e-6) -> TubeProbe:
    """First τ at which Im f stops being positive definite along this leaf.

    σ is sampled (default 41 points on [-π/2, π/2]) with a guard band around
    real poles of f; τ is scanned on a uniform grid and the first sign change
    of min_σ Im f is refined by bisection.
    """
    if tau_max <= 0:
        raise ValueError("tau_max must be positive")
    if sigma is None:
        a, b = profile.real_range
        lo, hi = max(a, -np.pi / 2), min(b, np.pi / 2)
        sigma = np.linspace(lo, hi, 41)
    sig, _ = _sigma_samples(profile, sigma)
    taus = np.linspace(0.0, tau_max, tau_steps + 1)[1:]
    m = _min_over_sigma(profile, sig, taus)
    bad = np.nonzero(m <= 0)[0]
    if len(bad) == 0:
        return TubeProbe(None, float(tau_max), profile.describe())
    k = bad[0]
    hi = taus[k]
    lo = taus[k - 1] if k > 0 else 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _min_over_sigma(profile, sig, mid)[0] <= 0:
            hi = mid
        else:
            lo = mid
    return TubeProbe(0.5 * (lo + hi), float(tau_max), profile.describe())


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

FGRID_CSV_HEADER = ["sigma", "tau", "re_f", "im_f", "min_eig"]


def write_f_grid_csv(profile: CurvatureProfile, sigma, tau, path):
    Z, fn = f_grid(profile, sigma, tau)
    mins = _min_eig_im(fn, Z)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FGRID_CSV_HEADER)
        for z, f, m in zip(Z.ravel(), fn.ravel(), mins.ravel()):
            w.writerow([repr(float(z.real)), repr(float(z.imag)), repr(float(f.real)), repr(float(f.imag)), repr(float(m))])


def report_json(report: dict, **kw) -> str:
    return json.dumps(report, **kw)
