"""Topological entropy of the geodesic flow, three ways.

* ``mane_series``: Monte Carlo ∫∫ n_T(x, y) dx dy over pairs of points.
* ``jacobi_det_series``: Liouville average of the vertical determinant.
* ``spanning_series``: greedy ε-spanning / ε-separated / covering counts of a
  finite mesh of SM under the Bowen distance d_T.

``fit_entropy`` turns any of them into an :class:`EntropyEstimate`.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .counting import DEFAULT_DIRECTIONS, build_fan, counts_by_horizon, solve_targets
from .errors import MeshTooCoarseError
from .flow import vertical_determinants
from .integrate import propagate
from .metrics import SurfaceMetric

METHODS = ("mane", "jacobi-det", "spanning", "separated", "covering")


@dataclass
class GrowthSeries:
    horizons: np.ndarray
    values: np.ndarray
    method: str
    mc_errors: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.horizons = np.asarray(self.horizons, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        self.mc_errors = np.asarray(self.mc_errors, dtype=float)
        if not (len(self.horizons) == len(self.values) == len(self.mc_errors)):
            raise ValueError("horizons, values and errors must have equal length")
        if np.any(np.diff(self.horizons) <= 0):
            raise ValueError("horizons must be strictly increasing")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")

    def to_dict(self):
        return {
            "method": self.method,
            "horizons": self.horizons.tolist(),
            "values": self.values.tolist(),
            "mc_errors": [None if not np.isfinite(e) else float(e) for e in self.mc_errors],
            "info": _plain(self.info),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(["T", "value"])
        for T, v in zip(self.horizons, self.values):
            w.writerow([repr(float(T)), repr(float(v))])
        return buf.getvalue()


def _plain(obj):
    """Recursively convert numpy containers and scalars for JSON."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class EntropyEstimate:
    h: float
    ci: float
    fit_window: tuple
    method: str
    growth_class: str  # "polynomial" or "exponential"
    degree: float | None = None
    rate: float | None = None
    slope: float = 0.0
    aicc_polynomial: float = 0.0
    aicc_exponential: float = 0.0
    exploratory: bool = False
    warnings: list = field(default_factory=list)

    def to_dict(self):
        d = asdict(self)
        d["fit_window"] = list(self.fit_window)
        d["growth_class"] = (
            {"kind": "polynomial", "degree": self.degree}
            if self.growth_class == "polynomial"
            else {"kind": "exponential", "rate": self.rate}
        )
        return _plain(d)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def _aicc(rss, n, k=2):
    rss = max(rss, 1e-300)
    return n * math.log(rss / n) + 2 * k + 2 * k * (k + 1) / max(n - k - 1, 1)


def fit_entropy(series: GrowthSeries, window="upper-half", margin=2.0) -> EntropyEstimate:
    """Growth rate of a series, with polynomial/exponential classification.

    The slope of log(value) against T over the fit window (default: upper
    half of the grid) is the raw rate.  The growth class compares a·T^k with
    a·e^{bT} by small-sample AICc on log-values over all T > 0; exponential
    wins only if it is better by ``margin``.  A polynomial class means the
    limit of (1/T) log value is zero, so h is reported as 0 with the raw slope
    kept as a diagnostic; otherwise h = max(slope, 0).
    """
    T = series.horizons
    v = series.values
    if len(T) < 5:
        raise ValueError("need at least 5 grid points to fit")
    if np.any(v <= 0):
        raise ValueError("series values must be positive")
    notes = []
    if np.any(np.diff(v) < 0):
        msg = "series is not monotone"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        notes.append(msg)
    n = len(T)
    if window == "upper-half":
        lo = n // 2
        hi = n
    else:
        lo, hi = window
    lo = min(lo, n - 3)
    Tw, yw = T[lo:hi], np.log(v[lo:hi])
    if np.all(v[lo:hi] == v[lo]):
        notes.append("series is constant over the fit window")
    fit = stats.linregress(Tw, yw)
    slope = float(fit.slope)
    dof = len(Tw) - 2
    ci = float(stats.t.ppf(0.975, dof) * fit.stderr) if dof > 0 else float("inf")

    pos = T > 0
    Tp, yp = T[pos], np.log(v[pos])
    cp = np.polyfit(np.log(Tp), yp, 1)
    ce = np.polyfit(Tp, yp, 1)
    rss_p = float(np.sum((np.polyval(cp, np.log(Tp)) - yp) ** 2))
    rss_e = float(np.sum((np.polyval(ce, Tp) - yp) ** 2))
    a_p, a_e = _aicc(rss_p, len(Tp)), _aicc(rss_e, len(Tp))
    exponential = a_e < a_p - margin
    est = EntropyEstimate(
        h=max(slope, 0.0) if exponential else 0.0,
        ci=ci,
        fit_window=(float(Tw[0]), float(Tw[-1])),
        method=series.method,
        growth_class="exponential" if exponential else "polynomial",
        degree=None if exponential else float(cp[0]),
        rate=slope if exponential else None,
        slope=slope,
        aicc_polynomial=a_p,
        aicc_exponential=a_e,
        warnings=notes,
    )
    return est


# ---------------------------------------------------------------------------
# Mañé: counting integral over pairs
# ---------------------------------------------------------------------------


def mane_series(metric: SurfaceMetric, horizons, pair_samples=64, seed=0, n_base=None,
                n_dirs=DEFAULT_DIRECTIONS) -> GrowthSeries:
    """Monte Carlo ∫∫ n_T(x, y) dx dy with one set of pairs for all horizons.

    Base points x are few (each needs a shooting fan up to the largest
    horizon); the targets y are split evenly between them.  Arcs are counted
    once at the largest horizon and binned by length.  Pairs whose target is
    conjugate to the base point along some arc are dropped.
    """
    horizons = np.asarray(horizons, dtype=float)
    rng = np.random.default_rng(seed)
    n_base = n_base or max(1, min(8, int(round(math.sqrt(pair_samples) / 2))))
    per = int(math.ceil(pair_samples / n_base))
    xc, xu = metric.sample_points(n_base, rng, qmc_seed=seed)
    yc, yu = metric.sample_points(n_base * per, rng, qmc_seed=seed + 1)
    counts, groups, dropped = [], [], 0
    for b in range(n_base):
        fan = build_fan(metric, (xc[b:b + 1], xu[b:b + 1]), float(horizons.max()), n_dirs)
        sl = slice(b * per, (b + 1) * per)
        sols = solve_targets(fan, (yc[sl], yu[sl]))
        bad = np.array([bool(np.any(s.degenerate)) for s in sols])
        dropped += int(bad.sum())
        c = counts_by_horizon([s for s, d in zip(sols, bad) if not d], horizons)
        counts.append(c)
        groups.append(np.full(c.shape[1], b))
    C = np.concatenate(counts, axis=1)
    A2 = metric.area() ** 2
    values = A2 * C.mean(axis=1)
    errors = A2 * C.std(axis=1, ddof=1) / math.sqrt(C.shape[1])
    info = {"pairs": int(C.shape[1]), "base_points": n_base, "dropped_degenerate": dropped,
            "angular_resolution": 2 * math.pi / n_dirs, "seed": seed}
    return GrowthSeries(horizons, values, "mane", errors, info)


# ---------------------------------------------------------------------------
# vertical determinant (Liouville average)
# ---------------------------------------------------------------------------


def liouville_samples(metric: SurfaceMetric, n, seed=0):
    """Unit tangent vectors distributed by the Liouville measure."""
    rng = np.random.default_rng(seed)
    c, u = metric.sample_points(n, rng, qmc_seed=seed)
    ang = rng.uniform(0.0, 2 * np.pi, n)
    e1, e2 = metric.frame(c, u)
    v = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    return c, u, v


def jacobi_det_series(metric: SurfaceMetric, horizons, theta_samples=1000, seed=0, chunk=2000) -> GrowthSeries:
    """∫_SM |det dφ_T restricted to the vertical space| dθ by Monte Carlo."""
    horizons = np.asarray(horizons, dtype=float)
    c, u, v = liouville_samples(metric, theta_samples, seed)
    grid = horizons if horizons[0] > 0 else horizons[1:]
    parts = []
    for s in range(0, theta_samples, chunk):
        sl = slice(s, s + chunk)
        parts.append(vertical_determinants(metric, c[sl], u[sl], v[sl], grid))
    D = np.concatenate(parts, axis=1)
    if horizons[0] <= 0:
        D = np.vstack([np.ones((1, D.shape[1])), D])
    vol = 2 * np.pi * metric.area()
    values = vol * D.mean(axis=1)
    errors = vol * D.std(axis=1, ddof=1) / math.sqrt(D.shape[1])
    info = {"samples": theta_samples, "seed": seed, "vol_SM": vol}
    return GrowthSeries(horizons, values, "jacobi-det", errors, info)


# ---------------------------------------------------------------------------
# spanning / separated / covering counts
# ---------------------------------------------------------------------------


def _fibonacci_sphere(n):
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def sm_mesh(metric: SurfaceMetric, n_base, n_angles):
    """Finite mesh of SM: base points times equally spaced unit directions.

    ``n_base`` is the points per side of a chart grid for flat tori and
    custom charts, and the number of Fibonacci points for quadrics.
    """
    if hasattr(metric, "chart_coords_from_sphere"):
        c, u = metric.chart_coords_from_sphere(_fibonacci_sphere(n_base))
    elif hasattr(metric, "basis"):
        g = (np.arange(n_base) + 0.5) / n_base
        F = np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)
        u = F @ metric.basis.T
        c = np.zeros(len(u), dtype=int)
    else:
        a = metric.lo[0] + (np.arange(n_base) + 0.5) / n_base * (metric.hi[0] - metric.lo[0])
        b = metric.lo[1] + (np.arange(n_base) + 0.5) / n_base * (metric.hi[1] - metric.lo[1])
        u = np.stack(np.meshgrid(a, b, indexing="ij"), -1).reshape(-1, 2)
        c = np.zeros(len(u), dtype=int)
    ang = 2 * np.pi * np.arange(n_angles) / n_angles
    e1, e2 = metric.frame(c, u)
    C = np.repeat(c, n_angles)
    U = np.repeat(u, n_angles, axis=0)
    A = np.tile(ang, len(u))
    V = np.cos(A)[:, None] * np.repeat(e1, n_angles, axis=0) + np.sin(A)[:, None] * np.repeat(e2, n_angles, axis=0)
    return C, U, V


def _phase_coords(metric, chart, u, v):
    """Coordinates on SM whose max-norm differences define the distance d.

    Returns the coordinates and the per-column period (inf if not periodic).
    """
    L = metric.locate(chart, u)
    V = metric.velocity_locator(chart, u, v)
    period = metric.locator_period
    if period is None:
        period = np.full(L.shape[1], np.inf)
    return np.concatenate([L, V], axis=1), np.concatenate([period, np.full(V.shape[1], np.inf)])


def _pair_distance(a, b, period):
    """Max-norm distance with wrap-around in periodic columns; a (n, d), b (m, d) -> (n, m)."""
    out = np.zeros((len(a), len(b)), dtype=np.result_type(a, b))
    for k, P in enumerate(period):
        d = np.abs(np.subtract.outer(a[:, k], b[:, k]))
        if np.isfinite(P):
            d = np.minimum(d, P - d)
        np.maximum(out, d, out=out)
    return out


def mesh_covering_radius(metric, mesh_coords, period, n_probe=512, seed=0):
    """Largest distance from random Liouville samples to the nearest mesh point."""
    c, u, v = liouville_samples(metric, n_probe, seed + 7919)
    P, _ = _phase_coords(metric, c, u, v)
    best = np.full(n_probe, np.inf)
    for s in range(0, len(mesh_coords), 4096):
        best = np.minimum(best, _pair_distance(P, mesh_coords[s:s + 4096], period).min(axis=1))
    return float(best.max())


def _greedy_separated(D, eps):
    n = len(D)
    blocked = np.zeros(n, dtype=bool)
    chosen = 0
    for i in range(n):
        if not blocked[i]:
            chosen += 1
            blocked |= D[i] <= eps
    return chosen


def _greedy_spanning(D, eps):
    """Lazy greedy set cover by closed ε-balls centred at mesh points."""
    within = D <= eps
    uncovered = np.ones(len(D), dtype=bool)
    heap = [(-int(w.sum()), i) for i, w in enumerate(within)]
    heapq.heapify(heap)
    chosen = 0
    left = len(D)
    while left > 0:
        neg, i = heapq.heappop(heap)
        gain = int(np.count_nonzero(within[i] & uncovered))
        if heap and gain < -heap[0][0]:
            heapq.heappush(heap, (-gain, i))
            continue
        chosen += 1
        uncovered &= ~within[i]
        left = int(np.count_nonzero(uncovered))
    return chosen


def _greedy_cover(D, eps):
    """Greedy covering by sets of diameter < ε."""
    n = len(D)
    uncovered = np.ones(n, dtype=bool)
    sets = 0
    for i in range(n):
        if not uncovered[i]:
            continue
        sets += 1
        members = [i]
        uncovered[i] = False
        for j in np.nonzero(uncovered & (D[i] < eps))[0]:
            if np.all(D[j, members] < eps):
                members.append(j)
                uncovered[j] = False
    return sets


@dataclass
class SpanningCounts:
    horizons: np.ndarray
    eps: float
    span: np.ndarray
    sep: np.ndarray
    cov_eps: np.ndarray
    cov_2eps: np.ndarray
    mesh_size: int
    covering_radius: float

    def ordering_holds(self):
        return bool(np.all((self.cov_2eps <= self.span) & (self.span <= self.sep) & (self.sep <= self.cov_eps)))

    @property
    def saturation(self):
        return self.sep / self.mesh_size


def spanning_counts(metric: SurfaceMetric, eps, horizons, mesh=(9, 51), dt=0.2, check_mesh=True) -> SpanningCounts:
    """Greedy spanning, separated and covering counts of a mesh of SM under d_T.

    d(θ, θ') is the max-norm difference of (position, velocity) in the
    metric's locator coordinates (ambient R³ for quadrics, fractional lattice
    coordinates with wrap-around for flat tori), and d_T is its maximum over
    sampled times t ≤ T.

    A maximal ε-separated set is ε-spanning, so the reported spanning count
    is the smaller of lazy-greedy set cover and the separated count; the 2ε
    covering count is likewise capped by the spanning count (closed ε-balls
    have diameter ≤ 2ε).  This keeps cov(2ε) ≤ span ≤ sep ≤ cov(ε) on every run.
    """
    horizons = np.asarray(horizons, dtype=float)
    if eps <= 0:
        raise ValueError("eps must be positive")
    c, u, v = sm_mesh(metric, *mesh)
    N = len(u)
    X0, period = _phase_coords(metric, c, u, v)
    rad = mesh_covering_radius(metric, X0, period)
    if check_mesh and rad >= eps / 4:
        raise MeshTooCoarseError(f"mesh covering radius {rad:.3g} is not below eps/4 = {eps / 4:.3g}")

    n_t = max(2, int(math.ceil(horizons.max() / dt)) + 1)
    times = np.union1d(np.linspace(0.0, horizons.max(), n_t), horizons)
    y0 = np.concatenate([u, v], axis=1)
    res = propagate(metric, c, y0, horizons.max(), t_eval=times, record_cols=slice(0, 4))

    D = np.zeros((N, N), dtype=np.float32)
    buf = np.empty((N, N), dtype=np.float32)
    out = {k: [] for k in ("span", "sep", "cov1", "cov2")}
    hi = 0
    for i, t in enumerate(times):
        ch = res.eval_chart[i]
        Xt, _ = _phase_coords(metric, ch, res.eval_y[i, :, 0:2], res.eval_y[i, :, 2:4])
        Xt = Xt.astype(np.float32)
        for k, P in enumerate(period):
            np.subtract.outer(Xt[:, k], Xt[:, k], out=buf)
            np.abs(buf, out=buf)
            if np.isfinite(P):
                np.minimum(buf, np.float32(P) - buf, out=buf)
            np.maximum(D, buf, out=D)
        while hi < len(horizons) and np.isclose(t, horizons[hi]):
            sep = _greedy_separated(D, eps)
            span = min(_greedy_spanning(D, eps), sep)
            cov1 = _greedy_cover(D, eps)
            cov2 = min(_greedy_cover(D, 2 * eps), span)
            for k, val in zip(("span", "sep", "cov1", "cov2"), (span, sep, cov1, cov2)):
                out[k].append(val)
            hi += 1
    return SpanningCounts(horizons, float(eps), np.array(out["span"]), np.array(out["sep"]),
                          np.array(out["cov1"]), np.array(out["cov2"]), N, rad)


def default_spanning_setup(metric: SurfaceMetric):
    """(ε, mesh) giving a mesh covering radius below ε/4 at a few thousand points."""
    if hasattr(metric, "chart_coords_from_sphere"):
        # ambient coordinates: ε scales with size, Fibonacci count with area
        ratio = metric.area() / (4 * math.pi * metric.length_scale**2)
        return 0.8 * metric.length_scale, (int(math.ceil(150 * ratio)), 16)
    if hasattr(metric, "basis"):
        # fractional lattice coordinates, velocity in the unit circle
        return 0.25, (9, 51)
    return 0.25 * metric.length_scale, (12, 32)


def _plateau_start(horizons, values):
    """First horizon from which the series stays constant to the end (None if it never does)."""
    v = np.asarray(values)
    k = len(v) - 1
    while k > 0 and v[k - 1] == v[-1]:
        k -= 1
    return None if k == len(v) - 1 else float(horizons[k])


def spanning_series(metric: SurfaceMetric, eps, horizons, mesh=None, method="spanning", **kw) -> GrowthSeries:
    """Spanning, separated or covering counts as a growth series.

    ``eps`` and ``mesh`` default to :func:`default_spanning_setup`.  The info
    block flags a plateau: a count that is constant to the end of the grid
    while the separated set holds a sizable fraction of the mesh means the
    mesh, not the flow, limits the count.
    """
    d_eps, d_mesh = default_spanning_setup(metric)
    eps = d_eps if eps is None else eps
    mesh = d_mesh if mesh is None else mesh
    sc = spanning_counts(metric, eps, horizons, mesh, **kw)
    values = {"spanning": sc.span, "separated": sc.sep, "covering": sc.cov_eps}[method]
    info = {
        "eps": sc.eps,
        "mesh": list(mesh),
        "mesh_size": sc.mesh_size,
        "mesh_covering_radius": sc.covering_radius,
        "span": sc.span,
        "sep": sc.sep,
        "cov_eps": sc.cov_eps,
        "cov_2eps": sc.cov_2eps,
        "ordering_holds": sc.ordering_holds(),
        "saturation": sc.saturation,
        "plateau_from": _plateau_start(sc.horizons, values),
        "mesh_limited": bool(_plateau_start(sc.horizons, values) is not None and sc.saturation[-1] > 0.05),
    }
    return GrowthSeries(sc.horizons, values, method, np.zeros(len(values)), info)
