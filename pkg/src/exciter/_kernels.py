"""Compiled inner loops: intensity flow, event replay and thinning.

Parameters arrive in the flat form produced by ``ModelSpec.kernel_args`` and
``encode_marks``. Nothing here validates input.
"""
import math

import numba as nb
import numpy as np

from .numerics import expm_kernel, expm_phi_kernel

OK = 0
BLOWUP = 2
MAJORANT_FAILURE = 3
TOO_MANY_EVENTS = 4


@nb.njit(cache=True)
def drift_into(out, lam, lam0, A, Dd, c, nonlinear):
    d = lam.size
    g = 0.0
    if nonlinear:
        s = 0.0
        for i in range(d):
            s += lam[i] * lam[i]
        g = math.exp(-c * s)
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += A[i, j] * (lam[j] - lam0[j])
        if nonlinear:
            acc += Dd[i] * g * (lam[i] - lam0[i])
        out[i] = acc


@nb.njit(cache=True)
def rk4_flow(lam, comp, dt, steps, lam0, A, Dd, c, nonlinear, work):
    """Advance (lambda, compensator) in place by ``dt`` with ``steps`` RK4 steps."""
    d = lam.size
    h = dt / steps
    k1 = work[0]
    k2 = work[1]
    k3 = work[2]
    k4 = work[3]
    tmp = work[4]
    for _ in range(steps):
        drift_into(k1, lam, lam0, A, Dd, c, nonlinear)
        for i in range(d):
            tmp[i] = lam[i] + 0.5 * h * k1[i]
        drift_into(k2, tmp, lam0, A, Dd, c, nonlinear)
        for i in range(d):
            tmp[i] = lam[i] + 0.5 * h * k2[i]
        drift_into(k3, tmp, lam0, A, Dd, c, nonlinear)
        for i in range(d):
            tmp[i] = lam[i] + h * k3[i]
        drift_into(k4, tmp, lam0, A, Dd, c, nonlinear)
        for i in range(d):
            # compensator slopes are the stage intensities
            comp[i] += (h / 6.0) * (6.0 * lam[i] + h * (k1[i] + k2[i] + k3[i]))
            lam[i] += (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        for i in range(d):
            if not math.isfinite(lam[i]) or not math.isfinite(comp[i]):
                return False
    return True


@nb.njit(cache=True)
def linear_flow(lam, comp, dt, lam0, A):
    d = lam.size
    E, Phi = expm_phi_kernel(A, dt)
    x = lam - lam0
    for i in range(d):
        acc_c = lam0[i] * dt
        acc_l = 0.0
        for j in range(d):
            acc_c += Phi[i, j] * x[j]
            acc_l += E[i, j] * x[j]
        comp[i] += acc_c
        lam[i] = lam0[i] + acc_l
    for i in range(d):
        if not math.isfinite(lam[i]) or not math.isfinite(comp[i]):
            return False
    return True


@nb.njit(cache=True)
def rk4_steps(dt, spu):
    n = int(math.ceil(dt * spu))
    return n if n > 1 else 1


@nb.njit(cache=True)
def flow(lam, comp, dt, lam0, A, Dd, c, nonlinear, spu, work):
    if dt <= 0.0:
        return True
    if nonlinear:
        return rk4_flow(lam, comp, dt, rk4_steps(dt, spu), lam0, A, Dd, c, nonlinear, work)
    return linear_flow(lam, comp, dt, lam0, A)


@nb.njit(cache=True)
def replay_linear(E, Phi, gap_idx, times, comps, marks, T, lam_init, lam0, B):
    """Left limits at each event, compensator at T and lambda(T) for linear drift."""
    n = times.size
    d = lam0.size
    lam_minus = np.empty((n, d))
    x = lam_init - lam0
    comp = np.zeros(d)
    t_prev = 0.0
    for i in range(n + 1):
        t_next = times[i] if i < n else T
        dt = t_next - t_prev
        g = gap_idx[i]
        xn = np.zeros(d)
        for a in range(d):
            acc_c = lam0[a] * dt
            acc_l = 0.0
            for b in range(d):
                acc_c += Phi[g, a, b] * x[b]
                acc_l += E[g, a, b] * x[b]
            comp[a] += acc_c
            xn[a] = acc_l
        x = xn
        if i < n:
            k = comps[i]
            for a in range(d):
                lam_minus[i, a] = lam0[a] + x[a]
                x[a] += B[a, k] * marks[i]
        t_prev = t_next
    return lam_minus, comp, lam0 + x


@nb.njit(cache=True)
def replay_rk4(times, comps, marks, T, lam_init, lam0, A, B, Dd, c, nonlinear, spu):
    n = times.size
    d = lam0.size
    lam_minus = np.empty((n, d))
    lam = lam_init.copy()
    comp = np.zeros(d)
    work = np.empty((5, d))
    t_prev = 0.0
    ok = True
    for i in range(n + 1):
        t_next = times[i] if i < n else T
        dt = t_next - t_prev
        if dt > 0.0:
            ok = rk4_flow(lam, comp, dt, rk4_steps(dt, spu), lam0, A, Dd, c, nonlinear, work)
            if not ok:
                return lam_minus, comp, lam, False, t_prev
        if i < n:
            k = comps[i]
            for a in range(d):
                lam_minus[i, a] = lam[a]
                lam[a] += B[a, k] * marks[i]
        t_prev = t_next
    return lam_minus, comp, lam, True, T


@nb.njit(cache=True)
def sample_mark_kernel(k, lam, codes, params, emp, off, rng):
    code = codes[k]
    if code == 0:
        return rng.exponential(1.0 / params[k, 0])
    if code == 1:
        return math.exp(params[k, 0] + params[k, 1] * rng.standard_normal())
    if code == 2:
        n = off[k + 1] - off[k]
        return emp[off[k] + rng.integers(0, n)]
    s = 0.0
    for i in range(lam.size):
        s += lam[i] * lam[i]
    mu = params[k, 0] + params[k, 1] * math.log1p(math.sqrt(s))
    return math.exp(mu + params[k, 2] * rng.standard_normal())


@nb.njit(cache=True)
def _total_rate(lam, floor):
    s = 0.0
    for i in range(lam.size):
        s += lam[i] if lam[i] > floor else floor
    return s


@nb.njit(cache=True)
def flow_max(lam, w, lam0, A, Dd, c, nonlinear, spu, n_sub, floor, work):
    """Largest total rate on a grid over the deterministic flow on [0, w]."""
    d = lam.size
    best = _total_rate(lam, floor)
    if w <= 0.0:
        return best
    if nonlinear:
        steps = rk4_steps(w, spu)
        if steps < n_sub:
            steps = n_sub
        h = w / steps
        cur = lam.copy()
        dummy = np.zeros(d)
        for _ in range(steps):
            if not rk4_flow(cur, dummy, h, 1, lam0, A, Dd, c, nonlinear, work):
                return np.inf
            r = _total_rate(cur, floor)
            if r > best:
                best = r
        return best
    E = expm_kernel(A * (w / n_sub))
    x = lam - lam0
    cur = np.empty(d)
    for _ in range(n_sub):
        x = E @ x
        for i in range(d):
            cur[i] = lam0[i] + x[i]
        r = _total_rate(cur, floor)
        if not math.isfinite(r):
            return np.inf
        if r > best:
            best = r
    return best


@nb.njit(cache=True)
def simulate_kernel(T, lam_init, lam0, A, B, Dd, c, nonlinear, spu,
                    codes, params, emp, off,
                    lookahead, eta, n_sub, grid, rng, floor, max_events):
    """Ogata-style thinning with a windowed majorant of the deterministic flow."""
    d = lam0.size
    cap = 256
    ev_t = np.empty(cap)
    ev_k = np.empty(cap, dtype=np.int64)
    ev_y = np.empty(cap)
    n = 0
    ng = grid.size
    rec = np.empty((ng, d))
    rec_c = np.empty((ng, d))
    gi = 0
    lam = lam_init.copy()
    comp = np.zeros(d)
    work = np.empty((5, d))
    t = 0.0
    while gi < ng and grid[gi] <= 0.0:
        rec[gi] = lam
        rec_c[gi] = comp
        gi += 1
    status = OK
    shrinks = 0
    consecutive = 0
    win = lookahead
    while t < T:
        w_end = t + win
        if w_end > T:
            w_end = T
        if gi < ng and grid[gi] < w_end:
            w_end = grid[gi]
        lam_bar = eta * flow_max(lam, w_end - t, lam0, A, Dd, c, nonlinear, spu, n_sub, floor, work)
        if not math.isfinite(lam_bar):
            status = BLOWUP
            break
        s = t
        lam_s = lam.copy()
        comp_s = comp.copy()
        restart = False
        while True:
            tau = rng.exponential(1.0 / lam_bar)
            if s + tau >= w_end:
                if not flow(lam_s, comp_s, w_end - s, lam0, A, Dd, c, nonlinear, spu, work):
                    status = BLOWUP
                    break
                t = w_end
                lam = lam_s
                comp = comp_s
                while gi < ng and grid[gi] <= t:
                    rec[gi] = lam
                    rec_c[gi] = comp
                    gi += 1
                break
            s_new = s + tau
            lam_c = lam_s.copy()
            comp_c = comp_s.copy()
            if not flow(lam_c, comp_c, tau, lam0, A, Dd, c, nonlinear, spu, work):
                status = BLOWUP
                break
            total = _total_rate(lam_c, floor)
            if total > lam_bar:
                # majorant too low: resume from s with a shorter window
                shrinks += 1
                consecutive += 1
                if consecutive > 60:
                    status = MAJORANT_FAILURE
                    break
                t = s
                lam = lam_s
                comp = comp_s
                win *= 0.5
                restart = True
                break
            if rng.random() * lam_bar <= total:
                u = rng.random() * total
                k = d - 1
                acc = 0.0
                for j in range(d):
                    acc += lam_c[j] if lam_c[j] > floor else floor
                    if u < acc:
                        k = j
                        break
                y = sample_mark_kernel(k, lam_c, codes, params, emp, off, rng)
                if n == cap:
                    cap *= 2
                    nt = np.empty(cap)
                    nk = np.empty(cap, dtype=np.int64)
                    ny = np.empty(cap)
                    nt[:n] = ev_t
                    nk[:n] = ev_k
                    ny[:n] = ev_y
                    ev_t = nt
                    ev_k = nk
                    ev_y = ny
                ev_t[n] = s_new
                ev_k[n] = k
                ev_y[n] = y
                n += 1
                for j in range(d):
                    lam_c[j] += B[j, k] * y
                lam = lam_c
                comp = comp_c
                t = s_new
                break
            s = s_new
            lam_s = lam_c
            comp_s = comp_c
        if status != OK:
            break
        if n > max_events:
            status = TOO_MANY_EVENTS
            break
        if not restart:
            win = lookahead
            consecutive = 0
    return ev_t[:n].copy(), ev_k[:n].copy(), ev_y[:n].copy(), rec, rec_c, lam, comp, t, status, shrinks


@nb.njit(cache=True)
def replay_eigen(w, V, Vinv, times, comps, marks, T, lam_init, lam0, B):
    """Linear replay in the eigenbasis of A, ``A = V diag(w) V^{-1}``."""
    n = times.size
    d = lam0.size
    lam_minus = np.empty((n, d))
    z = Vinv @ (lam_init - lam0).astype(np.complex128)
    Bt = Vinv @ B.astype(np.complex128)
    comp = np.zeros(d)
    zc = np.zeros(d, dtype=np.complex128)
    t_prev = 0.0
    for i in range(n + 1):
        t_next = times[i] if i < n else T
        dt = t_next - t_prev
        for a in range(d):
            u = w[a] * dt
            if abs(u) < 1e-5:
                phi = dt * (1.0 + u * (0.5 + u / 6.0))
            else:
                phi = (np.exp(u) - 1.0) / w[a]
            zc[a] = phi * z[a]
            z[a] = np.exp(u) * z[a]
        for a in range(d):
            acc_c = 0.0
            for b in range(d):
                acc_c += (V[a, b] * zc[b]).real
            comp[a] += lam0[a] * dt + acc_c
        if i < n:
            k = comps[i]
            for a in range(d):
                acc = 0.0
                for b in range(d):
                    acc += (V[a, b] * z[b]).real
                lam_minus[i, a] = lam0[a] + acc
            for a in range(d):
                z[a] += Bt[a, k] * marks[i]
        t_prev = t_next
    lamT = np.empty(d)
    for a in range(d):
        acc = 0.0
        for b in range(d):
            acc += (V[a, b] * z[b]).real
        lamT[a] = lam0[a] + acc
    return lam_minus, comp, lamT
