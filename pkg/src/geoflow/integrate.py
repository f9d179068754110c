"""Batched adaptive Dormand–Prince 5(4) integration of the geodesic flow.

Each row of the batch is an independent trajectory with its own step size,
end time and chart.  The state row is

    (u1, u2, v1, v2, U_1, U_1', ..., U_m, U_m')

where (u, v) are chart position and velocity and each (U, U') is a scalar
normal Jacobi field co-integrated with the geodesic through
U'' = -K g(v, v) U.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._kernels import integrate_rows
from .errors import PointOutsideChartError, StepSizeUnderflowError, ToleranceNotAchievedError

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B - _B4

DEFAULT_RTOL = 1e-10
DEFAULT_ATOL = 1e-12
MAX_STEPS = 2_000_000
MIN_ROWS_PER_THREAD = 64

_threads = None


def set_threads(n: int | None):
    """Worker threads for compiled batch integration (None: all available cores)."""
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be at least 1")
    _threads = n


def get_threads() -> int:
    return _threads or os.cpu_count() or 1


@dataclass
class Propagation:
    chart: np.ndarray
    y: np.ndarray
    energy_drift: np.ndarray
    n_steps: np.ndarray
    eval_chart: np.ndarray | None = None
    eval_y: np.ndarray | None = None
    step_t: list = field(default_factory=list)
    step_chart: list = field(default_factory=list)
    step_y: list = field(default_factory=list)


def geodesic_rhs(metric, chart, y, n_jacobi):
    u, v = y[:, 0:2], y[:, 2:4]
    acc, gvv, K = metric.geodesic_terms(chart, u, v, need_curvature=n_jacobi > 0)
    dy = np.empty_like(y)
    dy[:, 0:2] = v
    dy[:, 2:4] = acc
    for j in range(n_jacobi):
        a = 4 + 2 * j
        dy[:, a] = y[:, a + 1]
        dy[:, a + 1] = -K * gvv * y[:, a]
    return dy, gvv


def propagate(
    metric,
    chart,
    y,
    t_end,
    *,
    n_jacobi=0,
    rtol=DEFAULT_RTOL,
    atol=DEFAULT_ATOL,
    t_eval=None,
    record_cols=None,
    record_steps=False,
    compiled=True,
) -> Propagation:
    """Integrate a batch of geodesics (with optional Jacobi columns).

    Parameters
    ----------
    metric : SurfaceMetric
    chart : (N,) int array
    y : (N, 4 + 2*n_jacobi) array
    t_end : float or (N,) array
        Flow time per trajectory.  Speeds are arbitrary; the speed at t = 0
        is the reference for drift and renormalisation.
    t_eval : sorted 1-d array, optional
        Common output times (only sensible when all ``t_end`` agree); steps
        are clipped so that every output time is hit exactly.
    record_cols : slice, optional
        Columns of the state stored at ``t_eval`` (default all).
    record_steps : bool
        Keep every accepted step (intended for single trajectories).
    compiled : bool
        Use the compiled per-row loop when the metric supports it (same
        scheme and controller; the numpy loop remains the fallback).
    """
    chart = np.array(chart, dtype=int).copy()
    y = np.array(y, dtype=float).copy()
    N, D = y.shape
    t_end = np.broadcast_to(np.asarray(t_end, dtype=float), (N,)).copy()
    if np.any(t_end < 0):
        raise ValueError("integration time must be non-negative")
    params = metric.compiled_params() if compiled and not record_steps else None
    if params is not None:
        return _propagate_compiled(metric, params, chart, y, t_end, n_jacobi, rtol, atol, t_eval, record_cols)

    f0, gvv0 = geodesic_rhs(metric, chart, y, n_jacobi)
    speed = np.sqrt(gvv0)
    drift = np.zeros(N)
    n_steps = np.zeros(N, dtype=int)
    s = np.zeros(N)
    scale = np.maximum(metric.length_scale / np.maximum(speed, 1e-300), 1e-300)
    h = np.minimum(0.05 * scale, np.maximum(t_end, 1e-300))
    fsal = f0
    fsal_ok = np.ones(N, dtype=bool)

    cols = record_cols if record_cols is not None else slice(None)
    out = Propagation(chart, y, drift, n_steps)
    if t_eval is not None:
        t_eval = np.asarray(t_eval, dtype=float)
        n_out = len(t_eval)
        width = len(range(D)[cols])
        out.eval_y = np.full((n_out, N, width), np.nan)
        out.eval_chart = np.full((n_out, N), -1, dtype=int)
        nxt = np.zeros(N, dtype=int)
        at0 = t_eval[0] <= 0.0 if n_out else False
        if at0:
            out.eval_y[0] = y[:, cols]
            out.eval_chart[0] = chart
            nxt[:] = 1
    if record_steps:
        out.step_t.append(s.copy())
        out.step_chart.append(chart.copy())
        out.step_y.append(y.copy())

    tiny = 4 * np.finfo(float).eps
    active = s < t_end
    iterations = 0
    while np.any(active):
        iterations += 1
        if iterations > MAX_STEPS:
            raise ToleranceNotAchievedError("step budget exhausted")
        I = np.nonzero(active)[0]
        cI, yI, sI = chart[I], y[I], s[I]
        hI = h[I].copy()
        remaining = t_end[I] - sI
        stop = remaining.copy()
        if t_eval is not None:
            has_next = nxt[I] < len(t_eval)
            nt = np.where(has_next, t_eval[np.minimum(nxt[I], len(t_eval) - 1)], np.inf)
            stop = np.minimum(stop, nt - sI)
        if metric.max_step_length is not None:
            hI = np.minimum(hI, metric.max_step_length / speed[I])
        clipped = hI >= stop * (1 - tiny)
        hI = np.where(clipped, stop, hI)
        if np.any(~clipped & (hI < 1e-14 * np.maximum(1.0, t_end[I]))):
            raise StepSizeUnderflowError("step size underflow; chart data may be singular")

        k = [None] * 7
        k[0] = np.where(fsal_ok[I, None], fsal[I], 0.0)
        need = ~fsal_ok[I]
        if np.any(need):
            k[0][need] = geodesic_rhs(metric, cI[need], yI[need], n_jacobi)[0]
        for st in range(1, 7):
            yy = yI + hI[:, None] * sum(a * k[j] for j, a in enumerate(_A[st]) if a != 0.0)
            if st < 6:
                k[st] = geodesic_rhs(metric, cI, yy, n_jacobi)[0]
            else:
                y5 = yy
                k[6], gvv_new = geodesic_rhs(metric, cI, y5, n_jacobi)
        err = hI[:, None] * sum(e * k[j] for j, e in enumerate(_E) if e != 0.0)
        sc = atol + rtol * np.maximum(np.abs(yI), np.abs(y5))
        en = np.sqrt(np.mean((err / sc) ** 2, axis=1))
        ok = en <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.clip(0.9 * np.power(np.maximum(en, 1e-12), -0.2), 0.2, 5.0)
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        h[I] = np.where(clipped & ok, np.maximum(h[I], hI * fac), hI * fac)

        A_ = I[ok]
        if len(A_):
            okc = clipped[ok]
            s_new = sI[ok] + hI[ok]
            s_new = np.where(okc, sI[ok] + stop[ok], s_new)
            if t_eval is not None:
                hit = okc & (np.abs(s_new - np.where(has_next[ok], nt[ok], np.inf)) <= 1e-12 * np.maximum(1.0, np.abs(s_new)))
                s_new = np.where(hit, nt[ok], s_new)
            end_hit = okc & (np.abs(t_end[A_] - s_new) <= 1e-12 * np.maximum(1.0, t_end[A_]))
            s_new = np.where(end_hit, t_end[A_], s_new)
            s[A_] = s_new
            y[A_] = y5[ok]
            fsal[A_] = k[6][ok]
            fsal_ok[A_] = True
            n_steps[A_] += 1
            rel = np.abs(gvv_new[ok] / speed[A_] ** 2 - 1.0)
            drift[A_] = np.maximum(drift[A_], rel)

            cA, uA = chart[A_], y[A_, 0:2]
            sw = metric.needs_switch(cA, uA)
            if np.any(sw):
                W = A_[sw]
                c2, u2, v2 = metric.switch(chart[W], y[W, 0:2], y[W, 2:4])
                g2 = metric.metric_tensor(c2, u2)
                sp = np.sqrt(np.einsum("ni,nij,nj->n", v2, g2, v2))
                chart[W] = c2
                y[W, 0:2] = u2
                y[W, 2:4] = v2 * (speed[W] / sp)[:, None]
                fsal_ok[W] = False
            dom = metric.in_domain(chart[A_], y[A_, 0:2])
            if not np.all(dom):
                raise PointOutsideChartError("trajectory left a non-periodic chart domain")

            if t_eval is not None:
                H = A_[hit]
                if len(H):
                    out.eval_y[nxt[H], H] = y[H][:, cols]
                    out.eval_chart[nxt[H], H] = chart[H]
                    nxt[H] += 1
            if record_steps:
                out.step_t.append(s.copy())
                out.step_chart.append(chart.copy())
                out.step_y.append(y.copy())
        active = s < t_end

    # terminal renormalisation to the initial speed
    g = metric.metric_tensor(chart, y[:, 0:2])
    sp = np.sqrt(np.einsum("ni,nij,nj->n", y[:, 2:4], g, y[:, 2:4]))
    fix = speed > 0
    drift[fix] = np.maximum(drift[fix], np.abs(sp[fix] / speed[fix] - 1.0))
    y[fix, 2:4] *= (speed[fix] / sp[fix])[:, None]
    out.chart, out.y, out.energy_drift, out.n_steps = chart, y, drift, n_steps
    return out


def _propagate_compiled(metric, p, chart, y, t_end, n_jacobi, rtol, atol, t_eval, record_cols):
    N, D = y.shape
    cols = range(D)[record_cols if record_cols is not None else slice(None)]
    if cols.step != 1:
        raise ValueError("record_cols must be a contiguous slice")
    lo, hi = cols.start, cols.stop
    te = np.empty(0) if t_eval is None else np.ascontiguousarray(t_eval, dtype=float)
    chart = np.ascontiguousarray(chart, dtype=np.int64)
    y = np.ascontiguousarray(y)
    drift = np.zeros(N)
    n_steps = np.zeros(N, dtype=np.int64)

    def run(a, b):
        ey = np.full((len(te), b - a, hi - lo), np.nan)
        ec = np.full((len(te), b - a), -1, dtype=np.int64)
        status = integrate_rows(
            p["kind"], chart[a:b], y[a:b], t_end[a:b], n_jacobi, rtol, atol, te, lo, hi,
            metric.max_step_length or 0.0, float(metric.length_scale),
            p["semi"], p["axes"], p["R"], p["conformal"], p["eps"], p["r"],
            p["basis"], p["basis_inv"], ey, ec, drift[a:b], n_steps[a:b],
        )
        return status, ey, ec

    n_blocks = max(1, min(get_threads(), N // MIN_ROWS_PER_THREAD))
    edges = np.linspace(0, N, n_blocks + 1).astype(int)
    if n_blocks == 1:
        results = [run(0, N)]
    else:
        with ThreadPoolExecutor(n_blocks) as pool:
            results = list(pool.map(run, edges[:-1], edges[1:]))
    if any(r[0] == 1 for r in results):
        raise StepSizeUnderflowError("step size underflow; chart data may be singular")
    out = Propagation(chart, y, drift, n_steps)
    if t_eval is not None:
        out.eval_y = np.concatenate([r[1] for r in results], axis=1)
        out.eval_chart = np.concatenate([r[2] for r in results], axis=1)
    return out
