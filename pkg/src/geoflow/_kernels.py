"""Compiled kernels for the built-in metrics.

``quadric_point`` mirrors ``QuadricMetric.christoffel``/``curvature`` (the
numpy versions stay the reference and are cross-checked in the tests), and
``integrate_rows`` is the compiled twin of ``integrate.propagate`` for the
quadric and flat-torus kinds.
"""

import numpy as np
from numba import njit

KIND_QUADRIC = 0
KIND_TORUS = 1

SWITCH_R2 = 1.6 * 1.6

# Dormand–Prince 5(4)
A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656
B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84
E1 = 35 / 384 - 5179 / 57600
E3 = 500 / 1113 - 7571 / 16695
E4 = 125 / 192 - 393 / 640
E5 = -2187 / 6784 + 92097 / 339200
E6 = 11 / 84 - 187 / 2100
E7 = -1 / 40


@njit(cache=True, error_model="numpy", inline="always")
def _sphere_map(chart, u1, u2, s, ds, d2s, second):
    q = 1.0 + u1 * u1 + u2 * u2
    f = 1.0 / q
    f2 = f * f
    f3 = f2 * f
    c1 = -1.0 if chart == 0 else 1.0
    c2 = 1.0 if chart == 0 else -1.0
    for a in range(2):
        ua = u1 if a == 0 else u2
        ca = 1.0 if a == 0 else c1
        s[a] = ca * 2.0 * ua * f
        for j in range(2):
            uj = u1 if j == 0 else u2
            dfj = -2.0 * uj * f2
            val = 2.0 * ua * dfj
            if a == j:
                val += 2.0 * f
            ds[a, j] = ca * val
            if second:
                for k in range(2):
                    uk = u1 if k == 0 else u2
                    dfk = -2.0 * uk * f2
                    d2f = 8.0 * uj * uk * f3
                    if j == k:
                        d2f -= 2.0 * f2
                    w = 2.0 * ua * d2f
                    if a == j:
                        w += 2.0 * dfk
                    if a == k:
                        w += 2.0 * dfj
                    d2s[a, j, k] = ca * w
    s[2] = c2 * (1.0 - 2.0 * f)
    for j in range(2):
        uj = u1 if j == 0 else u2
        ds[2, j] = c2 * (4.0 * uj * f2)
        if second:
            for k in range(2):
                uk = u1 if k == 0 else u2
                d2f = 8.0 * uj * uk * f3
                if j == k:
                    d2f -= 2.0 * f2
                d2s[2, j, k] = c2 * (-2.0 * d2f)


@njit(cache=True, error_model="numpy")
def _work():
    return (np.empty(3), np.empty(3), np.empty(3), np.empty(3), np.empty(3),
            np.empty((3, 2)), np.empty((3, 2, 2)), np.empty((3, 2)), np.empty((3, 2, 2)),
            np.empty((2, 2, 2)))


@njit(cache=True, error_model="numpy", inline="always")
def quadric_point(chart, u1, u2, v0, v1, semi, axes, R, conformal, eps, r, need_K, wk, out):
    """Acceleration, g(v,v) and K at one point; results in out[0:4]."""
    s, X, gr, gq, nv, ds, d2s, Xd, Xdd, gam = wk
    _sphere_map(chart, u1, u2, s, ds, d2s, True)
    pa = axes[0] * axes[1] * axes[2]
    for a in range(3):
        acc_x = 0.0
        for b in range(3):
            acc_x += R[a, b] * s[b]
        X[a] = semi[a] * acc_x
        for j in range(2):
            t = 0.0
            for b in range(3):
                t += R[a, b] * ds[b, j]
            Xd[a, j] = semi[a] * t
            for k in range(2):
                t2 = 0.0
                for b in range(3):
                    t2 += R[a, b] * d2s[b, j, k]
                Xdd[a, j, k] = semi[a] * t2
    g00 = Xd[0, 0] * Xd[0, 0] + Xd[1, 0] * Xd[1, 0] + Xd[2, 0] * Xd[2, 0]
    g01 = Xd[0, 0] * Xd[0, 1] + Xd[1, 0] * Xd[1, 1] + Xd[2, 0] * Xd[2, 1]
    g11 = Xd[0, 1] * Xd[0, 1] + Xd[1, 1] * Xd[1, 1] + Xd[2, 1] * Xd[2, 1]
    det = g00 * g11 - g01 * g01
    i00 = g11 / det
    i01 = -g01 / det
    i11 = g00 / det
    for i in range(2):
        for j in range(2):
            h0 = Xd[0, 0] * Xdd[0, i, j] + Xd[1, 0] * Xdd[1, i, j] + Xd[2, 0] * Xdd[2, i, j]
            h1 = Xd[0, 1] * Xdd[0, i, j] + Xd[1, 1] * Xdd[1, i, j] + Xd[2, 1] * Xdd[2, i, j]
            gam[0, i, j] = i00 * h0 + i01 * h1
            gam[1, i, j] = i01 * h0 + i11 * h1
    Q = X[0] * X[0] / (axes[0] * axes[0]) + X[1] * X[1] / (axes[1] * axes[1]) + X[2] * X[2] / (axes[2] * axes[2])
    lam = 1.0
    lin = 1.0
    if conformal:
        lin = 1.0 - eps * (r[0] * X[0] + r[1] * X[1] + r[2] * X[2])
        lam = lin / (pa * Q)
        for a in range(3):
            gq[a] = 2.0 * X[a] / (axes[a] * axes[a])
            gr[a] = -eps * r[a] / lin - gq[a] / Q
        d0 = gr[0] * Xd[0, 0] + gr[1] * Xd[1, 0] + gr[2] * Xd[2, 0]
        d1 = gr[0] * Xd[0, 1] + gr[1] * Xd[1, 1] + gr[2] * Xd[2, 1]
        up0 = i00 * d0 + i01 * d1
        up1 = i01 * d0 + i11 * d1
        for k in range(2):
            upk = up0 if k == 0 else up1
            for i in range(2):
                di = d0 if i == 0 else d1
                for j in range(2):
                    dj = d0 if j == 0 else d1
                    gij = g00 if (i == 0 and j == 0) else (g11 if (i == 1 and j == 1) else g01)
                    corr = -gij * upk
                    if k == i:
                        corr += dj
                    if k == j:
                        corr += di
                    gam[k, i, j] += 0.5 * corr
    for k in range(2):
        out[k] = -(gam[k, 0, 0] * v0 * v0 + 2.0 * gam[k, 0, 1] * v0 * v1 + gam[k, 1, 1] * v1 * v1)
    out[2] = lam * (g00 * v0 * v0 + 2.0 * g01 * v0 * v1 + g11 * v1 * v1)
    out[3] = 0.0
    if need_K:
        KE = 1.0 / (pa * Q * Q)
        if not conformal:
            out[3] = KE
        else:
            nrm = 0.0
            for a in range(3):
                nv[a] = 2.0 * X[a] / axes[a]
                nrm += nv[a] * nv[a]
            nrm = np.sqrt(nrm)
            for a in range(3):
                nv[a] /= nrm
            trHF = 0.0
            nHFn = 0.0
            for a in range(3):
                trHF += 2.0 / axes[a]
                nHFn += nv[a] * nv[a] * 2.0 / axes[a]
            kappa = (trHF - nHFn) / nrm
            trH = 0.0
            nHn = 0.0
            gn = 0.0
            for a in range(3):
                gn += gr[a] * nv[a]
                for b in range(3):
                    hab = -eps * eps * r[a] * r[b] / (lin * lin) + gq[a] * gq[b] / (Q * Q)
                    if a == b:
                        hab -= 2.0 / (axes[a] * axes[a]) / Q
                        trH += hab
                    nHn += nv[a] * hab * nv[b]
            lap = trH - nHn - gn * kappa
            out[3] = (KE - 0.5 * lap) / lam


@njit(cache=True, error_model="numpy")
def quadric_terms(chart, u, v, semi, axes, R, conformal, eps, r, need_K, acc, gvv, K):
    wk = _work()
    out = np.empty(4)
    for row in range(u.shape[0]):
        quadric_point(chart[row], u[row, 0], u[row, 1], v[row, 0], v[row, 1],
                      semi, axes, R, conformal, eps, r, need_K, wk, out)
        acc[row, 0] = out[0]
        acc[row, 1] = out[1]
        gvv[row] = out[2]
        if need_K:
            K[row] = out[3]


@njit(cache=True, error_model="numpy")
def _rhs(kind, chart, y, dy, n_jac, semi, axes, R, conformal, eps, r, wk, out):
    """Returns g(v, v) at y and fills dy."""
    dy[0] = y[2]
    dy[1] = y[3]
    if kind == KIND_QUADRIC:
        quadric_point(chart, y[0], y[1], y[2], y[3], semi, axes, R, conformal, eps, r, n_jac > 0, wk, out)
        dy[2] = out[0]
        dy[3] = out[1]
        gvv = out[2]
        K = out[3]
    else:
        dy[2] = 0.0
        dy[3] = 0.0
        gvv = y[2] * y[2] + y[3] * y[3]
        K = 0.0
    for j in range(n_jac):
        a = 4 + 2 * j
        dy[a] = y[a + 1]
        dy[a + 1] = -K * gvv * y[a]
    return gvv


@njit(cache=True, error_model="numpy", inline="always")
def _quadric_switch(chart, y, wk):
    """Move (u, v) of a quadric state into the other chart; returns new chart."""
    s, X, gr, gq, nv, ds, d2s, Xd, Xdd, gam = wk
    _sphere_map(chart, y[0], y[1], s, ds, d2s, False)
    a0 = ds[0, 0] * y[2] + ds[0, 1] * y[3]
    a1 = ds[1, 0] * y[2] + ds[1, 1] * y[3]
    a2 = ds[2, 0] * y[2] + ds[2, 1] * y[3]
    target = 1 - chart
    c1 = -1.0 if target == 0 else 1.0
    c2 = 1.0 if target == 0 else -1.0
    b0 = s[0]
    b1 = s[1] * c1
    b2 = s[2] * c2
    w1 = b0 / (1.0 - b2)
    w2 = b1 / (1.0 - b2)
    _sphere_map(target, w1, w2, s, ds, d2s, False)
    m00 = ds[0, 0] * ds[0, 0] + ds[1, 0] * ds[1, 0] + ds[2, 0] * ds[2, 0]
    m01 = ds[0, 0] * ds[0, 1] + ds[1, 0] * ds[1, 1] + ds[2, 0] * ds[2, 1]
    m11 = ds[0, 1] * ds[0, 1] + ds[1, 1] * ds[1, 1] + ds[2, 1] * ds[2, 1]
    r0 = ds[0, 0] * a0 + ds[1, 0] * a1 + ds[2, 0] * a2
    r1 = ds[0, 1] * a0 + ds[1, 1] * a1 + ds[2, 1] * a2
    det = m00 * m11 - m01 * m01
    y[0] = w1
    y[1] = w2
    y[2] = (m11 * r0 - m01 * r1) / det
    y[3] = (-m01 * r0 + m00 * r1) / det
    return target


@njit(cache=True, error_model="numpy", nogil=True)
def integrate_rows(kind, chart, y, t_end, n_jac, rtol, atol, t_eval, rec_lo, rec_hi,
                   max_step_len, length_scale, semi, axes, R, conformal, eps, r,
                   basis, basis_inv, eval_y, eval_chart, drift, n_steps):
    """Integrate every row independently; returns 0 on success, 1 on step underflow."""
    N, D = y.shape
    wk = _work()
    out = np.empty(4)
    k1 = np.empty(D)
    k2 = np.empty(D)
    k3 = np.empty(D)
    k4 = np.empty(D)
    k5 = np.empty(D)
    k6 = np.empty(D)
    k7 = np.empty(D)
    yy = np.empty(D)
    y5 = np.empty(D)
    n_eval = t_eval.shape[0]
    tiny = 4 * 2.220446049250313e-16
    for row in range(N):
        yr = y[row]
        c = chart[row]
        T = t_end[row]
        gvv0 = _rhs(kind, c, yr, k1, n_jac, semi, axes, R, conformal, eps, r, wk, out)
        speed = np.sqrt(gvv0)
        s = 0.0
        h = min(0.05 * length_scale / max(speed, 1e-300), max(T, 1e-300))
        nxt = 0
        if n_eval > 0 and t_eval[0] <= 0.0:
            for q in range(rec_lo, rec_hi):
                eval_y[0, row, q - rec_lo] = yr[q]
            eval_chart[0, row] = c
            nxt = 1
        dmax = 0.0
        steps = 0
        while s < T:
            stop = T - s
            target_eval = np.inf
            if nxt < n_eval:
                target_eval = t_eval[nxt]
                if target_eval - s < stop:
                    stop = target_eval - s
            hh = h
            if max_step_len > 0:
                lim = max_step_len / speed
                if hh > lim:
                    hh = lim
            clipped = hh >= stop * (1 - tiny)
            if clipped:
                hh = stop
            elif hh < 1e-14 * max(1.0, T):
                return 1
            for q in range(D):
                yy[q] = yr[q] + hh * A21 * k1[q]
            _rhs(kind, c, yy, k2, n_jac, semi, axes, R, conformal, eps, r, wk, out)
            for q in range(D):
                yy[q] = yr[q] + hh * (A31 * k1[q] + A32 * k2[q])
            _rhs(kind, c, yy, k3, n_jac, semi, axes, R, conformal, eps, r, wk, out)
            for q in range(D):
                yy[q] = yr[q] + hh * (A41 * k1[q] + A42 * k2[q] + A43 * k3[q])
            _rhs(kind, c, yy, k4, n_jac, semi, axes, R, conformal, eps, r, wk, out)
            for q in range(D):
                yy[q] = yr[q] + hh * (A51 * k1[q] + A52 * k2[q] + A53 * k3[q] + A54 * k4[q])
            _rhs(kind, c, yy, k5, n_jac, semi, axes, R, conformal, eps, r, wk, out)
            for q in range(D):
                yy[q] = yr[q] + hh * (A61 * k1[q] + A62 * k2[q] + A63 * k3[q] + A64 * k4[q] + A65 * k5[q])
            _rhs(kind, c, yy, k6, n_jac, semi, axes, R, conformal, eps, r, wk, out)
            for q in range(D):
                y5[q] = yr[q] + hh * (B1 * k1[q] + B3 * k3[q] + B4 * k4[q] + B5 * k5[q] + B6 * k6[q])
            gvv_new = _rhs(kind, c, y5, k7, n_jac, semi, axes, R, conformal, eps, r, wk, out)
            en = 0.0
            for q in range(D):
                e = hh * (E1 * k1[q] + E3 * k3[q] + E4 * k4[q] + E5 * k5[q] + E6 * k6[q] + E7 * k7[q])
                sc = atol + rtol * max(abs(yr[q]), abs(y5[q]))
                en += (e / sc) ** 2
            en = np.sqrt(en / D)
            if en <= 1.0:
                fac = 5.0 if en < 1e-12 else min(5.0, max(0.2, 0.9 * en ** -0.2))
                if clipped:
                    s_new = s + stop
                    if nxt < n_eval and abs(s_new - target_eval) <= 1e-12 * max(1.0, abs(s_new)):
                        s_new = target_eval
                    if abs(T - s_new) <= 1e-12 * max(1.0, T):
                        s_new = T
                    h = max(h, hh * fac)
                else:
                    s_new = s + hh
                    h = hh * fac
                s = s_new
                for q in range(D):
                    yr[q] = y5[q]
                    k1[q] = k7[q]
                steps += 1
                rel = abs(gvv_new / (speed * speed) - 1.0)
                if rel > dmax:
                    dmax = rel
                switched = False
                if kind == KIND_QUADRIC:
                    if yr[0] * yr[0] + yr[1] * yr[1] > SWITCH_R2:
                        c = _quadric_switch(c, yr, wk)
                        switched = True
                else:
                    f0 = basis_inv[0, 0] * yr[0] + basis_inv[0, 1] * yr[1]
                    f1 = basis_inv[1, 0] * yr[0] + basis_inv[1, 1] * yr[1]
                    if f0 < -0.25 or f0 >= 1.25 or f1 < -0.25 or f1 >= 1.25:
                        f0 -= np.floor(f0)
                        f1 -= np.floor(f1)
                        yr[0] = basis[0, 0] * f0 + basis[0, 1] * f1
                        yr[1] = basis[1, 0] * f0 + basis[1, 1] * f1
                        switched = True
                if switched:
                    g2 = _rhs(kind, c, yr, k1, n_jac, semi, axes, R, conformal, eps, r, wk, out)
                    fix = speed / np.sqrt(g2)
                    yr[2] *= fix
                    yr[3] *= fix
                    _rhs(kind, c, yr, k1, n_jac, semi, axes, R, conformal, eps, r, wk, out)
                if nxt < n_eval and s == t_eval[nxt]:
                    for q in range(rec_lo, rec_hi):
                        eval_y[nxt, row, q - rec_lo] = yr[q]
                    eval_chart[nxt, row] = c
                    nxt += 1
            else:
                fac = min(1.0, max(0.2, 0.9 * en ** -0.2))
                h = hh * fac
        g2 = _rhs(kind, c, yr, k1, n_jac, semi, axes, R, conformal, eps, r, wk, out)
        if speed > 0:
            sp = np.sqrt(g2)
            rel = abs(sp / speed - 1.0)
            if rel > dmax:
                dmax = rel
            yr[2] *= speed / sp
            yr[3] *= speed / sp
        chart[row] = c
        drift[row] = dmax
        n_steps[row] = steps
    return 0
