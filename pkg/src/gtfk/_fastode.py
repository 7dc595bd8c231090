"""Compiled integrator core for piecewise-polynomial parameter curves.

Mirrors the stepping logic of `ode._integrate` for the two phase-system
formulations, with the model coefficient functions inlined from the curve
piece tables (no Python callbacks in the hot loop).  Selected
automatically by `ode.solve_pinney_system` when the system spec carries
curve tables; set GTFK_NO_NUMBA=1 to force the pure-Python path.
"""

import numpy as np
from numba import njit

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0


@njit(cache=True)
def _ceval(breaks, coeffs, u):
    """Piecewise-cubic value and first derivative (flat extrapolation)."""
    n = breaks.shape[0]
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) // 2
        if breaks[mid] <= u:
            lo = mid + 1
        else:
            hi = mid
    i = lo - 1
    if i < 0:
        i = 0
    x = u - breaks[i]
    c1 = coeffs[i, 1]
    c2 = coeffs[i, 2]
    c3 = coeffs[i, 3]
    v = coeffs[i, 0] + x * (c1 + x * (c2 + x * c3))
    d = c1 + x * (2.0 * c2 + 3.0 * c3 * x)
    return v, d


@njit(cache=True)
def _rhs(mode, kb, kc, sb, sc, E, t, y, out):
    kv, kd = _ceval(kb, kc, t)
    sv, sd = _ceval(sb, sc, t)
    B = y.shape[1]
    s2 = sv * sv
    if mode == 0:  # Riccati: states (H, g, nu)
        keff = kv + sd / sv
        for b in range(B):
            H = y[0, b]
            g = y[1, b]
            s_inv_H = sv / H
            out[0, b] = s2 / H - (kv + g) * H
            out[1, b] = (g + 2.0 * keff) * g - s2 * E[b]
            out[2, b] = s_inv_H * s_inv_H
    else:  # direct: states (H, H', nu)
        r = sd / sv
        w2base = kv * kv + 2.0 * kv * r - kd
        for b in range(B):
            H = y[0, b]
            Hd = y[1, b]
            s_inv_H = sv / H
            s2_inv_H2 = s_inv_H * s_inv_H
            out[0, b] = Hd
            out[1, b] = (w2base + s2 * E[b]) * H + 2.0 * r * Hd - s2_inv_H2 * s2_inv_H2 * H
            out[2, b] = s2_inv_H2
    return out


@njit(cache=True)
def integrate(mode, kb, kc, sb, sc, E, knots, y0, rtol, atol, max_step, fixed_step):
    """Adaptive third-order pair over knot-aligned panels (table-driven).

    Returns (ts, ys, f_start, f_end, errs, n_nodes); arrays are oversized,
    valid up to n_nodes (nodes) / n_nodes - 1 (steps).
    """
    B = y0.shape[1]
    cap = 4096
    ts = np.empty(cap)
    ys = np.empty((cap, 3, B))
    f_start = np.empty((cap, 3, B))
    f_end = np.empty((cap, 3, B))
    errs = np.empty(cap)

    u_a = knots[0]
    u_b = knots[-1]
    span = u_b - u_a
    if max_step <= 0.0:
        max_step = span / 6.0
    n = 0
    ts[0] = u_a
    ys[0] = y0

    work1 = np.empty((3, B))
    work2 = np.empty((3, B))
    work3 = np.empty((3, B))
    work4 = np.empty((3, B))
    stage = np.empty((3, B))

    if fixed_step > 0.0:
        h_step = fixed_step
    else:
        h_step = min(knots[1] - knots[0], span / 100.0)
        if h_step > max_step:
            h_step = max_step
    err_prev = 1.0

    for ki in range(knots.shape[0] - 1):
        k0 = knots[ki]
        k1 = knots[ki + 1]
        t = k0
        tiny = 1e-13 * max(1.0, abs(k1))
        f0 = _rhs(mode, kb, kc, sb, sc, E, t, ys[n], work1)
        work1 = np.empty((3, B))  # f0 now owns the old work1 buffer
        while k1 - t > tiny:
            y = ys[n]
            dt = min(h_step, k1 - t)
            if dt > max_step:
                dt = max_step
            err = 0.0
            lands = False
            while True:
                if dt < 1e-14 * max(1.0, abs(t)):
                    return ts, ys, f_start, f_end, errs, -(n + 1)  # underflow signal
                lands = dt >= (k1 - t) - tiny
                for c in range(3):
                    for b in range(B):
                        stage[c, b] = y[c, b] + 0.5 * dt * f0[c, b]
                s2 = _rhs(mode, kb, kc, sb, sc, E, t + 0.5 * dt, stage, work2)
                for c in range(3):
                    for b in range(B):
                        stage[c, b] = y[c, b] + 0.75 * dt * s2[c, b]
                s3 = _rhs(mode, kb, kc, sb, sc, E, t + 0.75 * dt, stage, work3)
                ok = True
                for c in range(3):
                    for b in range(B):
                        v = y[c, b] + dt * (2.0 * f0[c, b] + 3.0 * s2[c, b] + 4.0 * s3[c, b]) / 9.0
                        stage[c, b] = v
                        if not np.isfinite(v):
                            ok = False
                for b in range(B):
                    if stage[0, b] <= 0.0:
                        ok = False
                if not ok:
                    dt *= 0.5
                    continue
                t_end = np.nextafter(k1, k0) if lands else t + dt
                s4 = _rhs(mode, kb, kc, sb, sc, E, t_end, stage, work4)
                err = 0.0
                for c in range(3):
                    for b in range(B):
                        ev = dt * (
                            -5.0 * f0[c, b] + 6.0 * s2[c, b] + 8.0 * s3[c, b] - 9.0 * s4[c, b]
                        ) / 72.0
                        ya = abs(y[c, b])
                        yb = abs(stage[c, b])
                        sc_ = atol + rtol * (ya if ya > yb else yb)
                        e = abs(ev) / sc_
                        if e > err:
                            err = e
                if fixed_step > 0.0 or err <= 1.0:
                    break
                fac = _SAFETY * max(err, 1e-16) ** (-1.0 / 3.0)
                if fac < _MIN_FACTOR:
                    fac = _MIN_FACTOR
                dt *= fac
            t = k1 if lands else t + dt
            n += 1
            if n + 1 >= cap:
                new_cap = cap * 2
                ts2 = np.empty(new_cap)
                ts2[:cap] = ts
                ys2 = np.empty((new_cap, 3, B))
                ys2[:cap] = ys
                fs2 = np.empty((new_cap, 3, B))
                fs2[:cap] = f_start
                fe2 = np.empty((new_cap, 3, B))
                fe2[:cap] = f_end
                er2 = np.empty(new_cap)
                er2[:cap] = errs
                ts, ys, f_start, f_end, errs = ts2, ys2, fs2, fe2, er2
                cap = new_cap
            ts[n] = t
            ys[n] = stage
            f_start[n - 1] = f0
            f_end[n - 1] = s4
            errs[n - 1] = err
            # FSAL: reuse s4 as next step's f0 (buffers rotate)
            tmp = f0
            f0 = s4
            work4 = tmp
            if fixed_step <= 0.0:
                e = max(err, 1e-16)
                fac = _SAFETY * e ** (-0.7 / 3.0) * err_prev ** (0.4 / 3.0)
                if fac > _MAX_FACTOR:
                    fac = _MAX_FACTOR
                if fac < _MIN_FACTOR:
                    fac = _MIN_FACTOR
                h_step = dt * fac
                err_prev = e
    return ts, ys, f_start, f_end, errs, n + 1
