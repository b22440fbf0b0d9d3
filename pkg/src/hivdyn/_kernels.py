"""Compiled numerical kernels behind the public API.

Hot paths only: adaptive Cash-Karp 5(4) stepping for the two dynamical
systems, a fixed-grid L-stable SDIRK(2) solver for the stiff target-cell
system, and the per-patient marginal log-likelihood (posterior-mode search
plus adaptive Gauss-Hermite quadrature) used by the mechanistic fit. The
likelihood grid is a pure function of the visit times, never of the model
parameters, so the objective stays smooth under finite differencing.

Everything here is deterministic and allocation-light.
"""

import math

import numpy as np
from numba import njit

# Cash-Karp 5(4) tableau (shared with hivdyn.ode.integrate).
_C2, _C3, _C4, _C5, _C6 = 1 / 5, 3 / 10, 3 / 5, 1.0, 7 / 8
_A21 = 1 / 5
_A31, _A32 = 3 / 40, 9 / 40
_A41, _A42, _A43 = 3 / 10, -9 / 10, 6 / 5
_A51, _A52, _A53, _A54 = -11 / 54, 5 / 2, -70 / 27, 35 / 27
_A61, _A62, _A63, _A64, _A65 = (1631 / 55296, 175 / 512, 575 / 13824,
                                44275 / 110592, 253 / 4096)
_B1, _B3, _B4, _B6 = 37 / 378, 250 / 621, 125 / 594, 512 / 1771
_E1, _E3, _E4, _E5, _E6 = (-277 / 64512, 6925 / 370944, -6925 / 202752,
                           -277 / 14336, 277 / 7084)

_MIN_STEP = 1e-12
_SDIRK_GAMMA = 1.0 - math.sqrt(2.0) / 2.0
_LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Two-pool (simulation) system
# ---------------------------------------------------------------------------
# parameter order: lambda_1, lambda_2, lambda_e, eps_1, eps_2, d_1, d_2, d_e,
# delta, delta_e, rho_1, rho_2, m_1, m_2, k_1, k_2, c, n_t, k_b, k_d, b_e

@njit(cache=True)
def _adams_rhs(y, p, k1e, k2e, out):
    t1, t2, ts1, ts2, v, e = y[0], y[1], y[2], y[3], y[4], y[5]
    inf1 = k1e * v * t1
    inf2 = k2e * v * t2
    tst = ts1 + ts2
    out[0] = p[0] - p[5] * t1 - inf1
    out[1] = p[1] - p[6] * t2 - inf2
    out[2] = inf1 - p[8] * ts1 - p[12] * e * ts1
    out[3] = inf2 - p[8] * ts2 - p[13] * e * ts2
    out[4] = p[17] * p[8] * tst - p[16] * v - (p[10] * inf1 + p[11] * inf2)
    out[5] = (p[2] + p[20] * tst / (tst + p[18]) * e
              - p[7] * tst / (tst + p[19]) * e - p[9] * e)


@njit(cache=True)
def adams_endpoint(p, y0, t0, t1, treated, rtol, atol):
    """Integrate the two-pool system to t1; returns (state, ok)."""
    n = 6
    k1e = p[14] * (1.0 - p[3]) if treated else p[14]
    k2e = p[15] * (1.0 - p[4]) if treated else p[15]
    y = y0.copy()
    ys = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    ynew = np.empty(n)
    t = t0
    h = min(1.0, t1 - t0) if t1 > t0 else 0.0
    while t < t1:
        if h > t1 - t:
            h = t1 - t
        if h < _MIN_STEP:
            t = t1
            break
        _adams_rhs(y, p, k1e, k2e, k1)
        for i in range(n):
            ys[i] = y[i] + h * _A21 * k1[i]
        _adams_rhs(ys, p, k1e, k2e, k2)
        for i in range(n):
            ys[i] = y[i] + h * (_A31 * k1[i] + _A32 * k2[i])
        _adams_rhs(ys, p, k1e, k2e, k3)
        for i in range(n):
            ys[i] = y[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
        _adams_rhs(ys, p, k1e, k2e, k4)
        for i in range(n):
            ys[i] = y[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i]
                                + _A54 * k4[i])
        _adams_rhs(ys, p, k1e, k2e, k5)
        for i in range(n):
            ys[i] = y[i] + h * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i]
                                + _A64 * k4[i] + _A65 * k5[i])
        _adams_rhs(ys, p, k1e, k2e, k6)
        errn = 0.0
        finite = True
        for i in range(n):
            ynew[i] = y[i] + h * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i]
                                  + _B6 * k6[i])
            if not math.isfinite(ynew[i]):
                finite = False
                break
            e = h * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i]
                     + _E6 * k6[i])
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            errn += (e / sc) ** 2
        errn = math.sqrt(errn / n)
        if finite and errn <= 1.0:
            neg_ok = True
            for i in range(n):
                if ynew[i] < -1e-9:
                    neg_ok = False
                elif ynew[i] < 0.0:
                    ynew[i] = 0.0
            if neg_ok:
                t += h
                for i in range(n):
                    y[i] = ynew[i]
                fac = 5.0 if errn == 0.0 else 0.9 * errn ** -0.2
                h *= min(5.0, max(0.2, fac))
                continue
        if finite and errn > 1.0:
            h *= max(0.2, 0.9 * errn ** -0.2)
        else:
            h *= 0.5
        if h < _MIN_STEP:
            return y, False
    return y, True


# ---------------------------------------------------------------------------
# Target-cell system
# ---------------------------------------------------------------------------
# rate order: lam, rho, alpha, mu_q, mu_t, mu_tstar, gamma_eff, pi, mu_v

@njit(cache=True)
def _target_rhs(y, r, out):
    q, t, ts, v = y[0], y[1], y[2], y[3]
    infec = r[6] * t * v
    out[0] = r[0] + r[1] * t - (r[2] + r[3]) * q
    out[1] = r[2] * q - infec - (r[1] + r[4]) * t
    out[2] = infec - r[5] * ts
    out[3] = r[7] * ts - r[8] * v


@njit(cache=True)
def target_equilibrium(r):
    """Closed-form steady state (infected branch if positive, else uninfected)."""
    t_inf = r[5] * r[8] / (r[6] * r[7])
    q_inf = (r[0] + r[1] * t_inf) / (r[2] + r[3])
    v_inf = (r[2] * q_inf - (r[1] + r[4]) * t_inf) / (r[6] * t_inf)
    out = np.empty(4)
    if v_inf > 0.0:
        out[0] = q_inf
        out[1] = t_inf
        out[2] = r[8] * v_inf / r[7]
        out[3] = v_inf
    else:
        t0 = r[0] * r[2] / (r[2] * r[4] + r[3] * (r[1] + r[4]))
        out[0] = (r[1] + r[4]) * t0 / r[2]
        out[1] = t0
        out[2] = 0.0
        out[3] = 0.0
    return out


@njit(cache=True)
def target_eval(r, y0, t0, t_out, rtol, atol, states):
    """Adaptive Cash-Karp solve landing exactly on each t_out; fills states."""
    n = 4
    y = y0.copy()
    ys = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    ynew = np.empty(n)
    t = t0
    m = t_out.shape[0]
    iv = 0
    while iv < m and t_out[iv] <= t0 + _MIN_STEP:
        for i in range(n):
            states[iv, i] = y[i]
        iv += 1
    if iv >= m:
        return True
    h = min(1.0, t_out[m - 1] - t0)
    while iv < m:
        tv = t_out[iv]
        landing = False
        if h >= tv - t:
            h = tv - t
            landing = True
        if h < _MIN_STEP:
            t = tv
            for i in range(n):
                states[iv, i] = y[i]
            iv += 1
            h = 1.0
            continue
        _target_rhs(y, r, k1)
        for i in range(n):
            ys[i] = y[i] + h * _A21 * k1[i]
        _target_rhs(ys, r, k2)
        for i in range(n):
            ys[i] = y[i] + h * (_A31 * k1[i] + _A32 * k2[i])
        _target_rhs(ys, r, k3)
        for i in range(n):
            ys[i] = y[i] + h * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
        _target_rhs(ys, r, k4)
        for i in range(n):
            ys[i] = y[i] + h * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i]
                                + _A54 * k4[i])
        _target_rhs(ys, r, k5)
        for i in range(n):
            ys[i] = y[i] + h * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i]
                                + _A64 * k4[i] + _A65 * k5[i])
        _target_rhs(ys, r, k6)
        errn = 0.0
        finite = True
        for i in range(n):
            ynew[i] = y[i] + h * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i]
                                  + _B6 * k6[i])
            if not math.isfinite(ynew[i]):
                finite = False
                break
            e = h * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i]
                     + _E6 * k6[i])
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            errn += (e / sc) ** 2
        errn = math.sqrt(errn / n)
        if finite and errn <= 1.0:
            neg_ok = True
            for i in range(n):
                if ynew[i] < -1e-9:
                    neg_ok = False
                elif ynew[i] < 0.0:
                    ynew[i] = 0.0
            if neg_ok:
                t += h
                for i in range(n):
                    y[i] = ynew[i]
                if landing:
                    t = tv
                    for i in range(n):
                        states[iv, i] = y[i]
                    iv += 1
                fac = 5.0 if errn == 0.0 else 0.9 * errn ** -0.2
                h *= min(5.0, max(0.2, fac))
                continue
        if finite and errn > 1.0:
            h *= max(0.2, 0.9 * errn ** -0.2)
        else:
            h *= 0.5
        if h < _MIN_STEP:
            return False
    return True


@njit(cache=True)
def _target_jac(y, r, jac):
    t, v = y[1], y[3]
    g = r[6]
    jac[0, 0] = -(r[2] + r[3])
    jac[0, 1] = r[1]
    jac[0, 2] = 0.0
    jac[0, 3] = 0.0
    jac[1, 0] = r[2]
    jac[1, 1] = -g * v - (r[1] + r[4])
    jac[1, 2] = 0.0
    jac[1, 3] = -g * t
    jac[2, 0] = 0.0
    jac[2, 1] = g * v
    jac[2, 2] = -r[5]
    jac[2, 3] = g * t
    jac[3, 0] = 0.0
    jac[3, 1] = 0.0
    jac[3, 2] = r[7]
    jac[3, 3] = -r[8]


@njit(cache=True)
def _solve4(a, b, x):
    """Solve a 4x4 system in-place (Gaussian elimination, partial pivoting)."""
    for col in range(4):
        piv = col
        big = abs(a[col, col])
        for row in range(col + 1, 4):
            if abs(a[row, col]) > big:
                big = abs(a[row, col])
                piv = row
        if big == 0.0:
            return False
        if piv != col:
            for j in range(4):
                tmp = a[col, j]
                a[col, j] = a[piv, j]
                a[piv, j] = tmp
            tmp = b[col]
            b[col] = b[piv]
            b[piv] = tmp
        inv = 1.0 / a[col, col]
        for row in range(col + 1, 4):
            f = a[row, col] * inv
            if f != 0.0:
                for j in range(col, 4):
                    a[row, j] -= f * a[col, j]
                b[row] -= f * b[col]
    for row in range(3, -1, -1):
        s = b[row]
        for j in range(row + 1, 4):
            s -= a[row, j] * x[j]
        x[row] = s / a[row, row]
    return True


@njit(cache=True)
def _sdirk_stage(y_scale, const, gh, r, z, f, jac, mat, resid, dz):
    """Newton-solve the stage equation z = const + gh * f(z); z holds the guess."""
    for _ in range(12):
        _target_rhs(z, r, f)
        rmax = 0.0
        for i in range(4):
            resid[i] = const[i] + gh * f[i] - z[i]
            sc = 1e-10 * (y_scale[i] + 1.0)
            m = abs(resid[i]) / (sc + 1e-300)
            if m > rmax:
                rmax = m
        if rmax < 1.0:
            return True
        _target_jac(z, r, jac)
        for i in range(4):
            for j in range(4):
                mat[i, j] = (1.0 if i == j else 0.0) - gh * jac[i, j]
        if not _solve4(mat, resid, dz):
            return False
        ok = True
        for i in range(4):
            z[i] += dz[i]
            if not math.isfinite(z[i]):
                ok = False
        if not ok:
            return False
    # Accept a nearly-converged stage; reject clear failures.
    return rmax < 10.0


@njit(cache=True)
def target_visits_sdirk(r, y0, rel_times, h0, growth, hmax, states):
    """Fixed-grid SDIRK(2) solve from t=0, recording states at rel_times.

    The grid (geometric growth from h0 capped at hmax, clipped to land on
    each output time) depends only on rel_times and the grid constants,
    never on r, so results are smooth functions of the parameters.
    """
    y = y0.copy()
    z1 = np.empty(4)
    z2 = np.empty(4)
    const = np.empty(4)
    f = np.empty(4)
    jac = np.empty((4, 4))
    mat = np.empty((4, 4))
    resid = np.empty(4)
    dz = np.empty(4)
    t = 0.0
    h = h0
    iv = 0
    m = rel_times.shape[0]
    while iv < m and rel_times[iv] <= _MIN_STEP:
        for i in range(4):
            states[iv, i] = y[i]
        iv += 1
    while iv < m:
        tv = rel_times[iv]
        landing = False
        hs = h
        if hs >= tv - t:
            hs = tv - t
            landing = True
        if hs < _MIN_STEP:
            t = tv
            for i in range(4):
                states[iv, i] = y[i]
            iv += 1
            continue
        gh = _SDIRK_GAMMA * hs
        # stage 1: z1 = y + gamma*h*f(z1)
        for i in range(4):
            const[i] = y[i]
            z1[i] = y[i]
        if not _sdirk_stage(y, const, gh, r, z1, f, jac, mat, resid, dz):
            return False
        _target_rhs(z1, r, f)
        # stage 2: z2 = y + (1-gamma)*h*k1 + gamma*h*f(z2); stiffly accurate
        for i in range(4):
            const[i] = y[i] + (hs - gh) * f[i]
            z2[i] = z1[i]
        if not _sdirk_stage(y, const, gh, r, z2, f, jac, mat, resid, dz):
            return False
        for i in range(4):
            yi = z2[i]
            if not math.isfinite(yi):
                return False
            if yi < 0.0:
                if yi < -1e-6 * (abs(y[i]) + 1.0):
                    return False
                yi = 0.0
            y[i] = yi
        t += hs
        if landing:
            t = tv
            for i in range(4):
                states[iv, i] = y[i]
            iv += 1
        h = h * growth
        if h > hmax:
            h = hmax
    return True


# ---------------------------------------------------------------------------
# Per-patient marginal log-likelihood (mechanistic model)
# ---------------------------------------------------------------------------

@njit(cache=True)
def _log_ndtr(z):
    if z > -30.0:
        return math.log(0.5 * math.erfc(-z / math.sqrt(2.0)) + 1e-300)
    # asymptotic left tail
    return -0.5 * z * z - math.log(-z) - 0.5 * _LOG_2PI + math.log1p(-1.0 / (z * z))


@njit(cache=True)
def _obs_loglik(pop9, beta, sig1, sig2, n_pre, rel_times, y4, lvl, below,
                lvl_floor, u1, u2, h0, growth, hmax, states):
    """Observation log-likelihood given random effects; returns (value, ok).

    Visits are sorted; the first n_pre precede treatment and sit at the
    untreated equilibrium, the rest are read from the treated solve whose
    states buffer is passed in (shape: len(rel_times) x 4).
    """
    r = np.empty(9)
    r[0] = math.exp(pop9[0] + u1)   # lam
    r[1] = math.exp(pop9[4])        # rho
    r[2] = math.exp(pop9[3])        # alpha
    r[3] = math.exp(pop9[2])        # mu_q
    r[4] = math.exp(pop9[5])        # mu_t
    r[5] = math.exp(pop9[1] + u2)   # mu_tstar
    r[6] = math.exp(pop9[6])        # gamma (untreated)
    r[7] = math.exp(pop9[7])        # pi
    r[8] = math.exp(pop9[8])        # mu_v
    eq = target_equilibrium(r)
    n_post = rel_times.shape[0]
    if n_post > 0:
        r[6] = math.exp(pop9[6] + beta)
        if not target_visits_sdirk(r, eq, rel_times, h0, growth, hmax, states):
            return 0.0, False
    ll = 0.0
    m = y4.shape[0]
    for j in range(m):
        if j < n_pre:
            tot = eq[0] + eq[1] + eq[2]
            v = eq[3]
        else:
            tot = states[j - n_pre, 0] + states[j - n_pre, 1] + states[j - n_pre, 2]
            v = states[j - n_pre, 3]
        if tot < 0.0:
            tot = 0.0
        pred4 = tot ** 0.25
        zc = (y4[j] - pred4) / sig1
        ll += -0.5 * zc * zc - math.log(sig1) - 0.5 * _LOG_2PI
        # viral load measured in copies/mL; state V is virions/uL
        if v < 1e-300:
            v = 1e-300
        predl = 3.0 + math.log10(v)
        if below[j] != 0:
            ll += _log_ndtr((lvl_floor - predl) / sig2)
        else:
            zv = (lvl[j] - predl) / sig2
            ll += -0.5 * zv * zv - math.log(sig2) - 0.5 * _LOG_2PI
    return ll, True


@njit(cache=True)
def _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre, rel_times, y4, lvl,
             below, lvl_floor, u1, u2, h0, growth, hmax, states):
    ll, ok = _obs_loglik(pop9, beta, sig1, sig2, n_pre, rel_times, y4, lvl,
                         below, lvl_floor, u1, u2, h0, growth, hmax, states)
    if not ok:
        return 0.0, False
    if om1 > 0.0:
        ll += -0.5 * (u1 / om1) ** 2 - math.log(om1) - 0.5 * _LOG_2PI
    if om2 > 0.0:
        ll += -0.5 * (u2 / om2) ** 2 - math.log(om2) - 0.5 * _LOG_2PI
    return ll, True


@njit(cache=True)
def patient_marginal_loglik(pop9, beta, om1, om2, sig1, sig2,
                            n_pre, rel_times, y4, lvl, below, lvl_floor,
                            zq, wq, h0, growth, hmax, u_start):
    """Marginal log-likelihood for one patient by adaptive Gauss-Hermite.

    Centers a tensor-product rule of order len(zq) at the posterior mode of
    the random effects (found by damped finite-difference Newton from
    u_start). Dimensions with a zero-scale random effect are pinned at 0;
    order 1 is the Laplace approximation.

    Returns (loglik, n_failed_nodes, n_nodes, mode1, mode2, ok).
    """
    act1 = om1 > 0.0
    act2 = om2 > 0.0
    n_post = rel_times.shape[0]
    states = np.empty((max(n_post, 1), 4))

    if not act1 and not act2:
        ll, ok = _obs_loglik(pop9, beta, sig1, sig2, n_pre, rel_times, y4,
                             lvl, below, lvl_floor, 0.0, 0.0, h0, growth,
                             hmax, states)
        return ll, 0, 1, 0.0, 0.0, ok

    u1 = u_start[0] if act1 else 0.0
    u2 = u_start[1] if act2 else 0.0
    cap1 = 8.0 * om1
    cap2 = 8.0 * om2
    g0, ok = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre, rel_times, y4,
                      lvl, below, lvl_floor, u1, u2, h0, growth, hmax, states)
    if not ok and (u1 != 0.0 or u2 != 0.0):
        u1 = 0.0
        u2 = 0.0
        g0, ok = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre, rel_times,
                          y4, lvl, below, lvl_floor, u1, u2, h0, growth,
                          hmax, states)
    if not ok:
        return 0.0, 0, 1, u1, u2, False

    hfd = 1e-4
    g1 = 0.0
    g2 = 0.0
    h11 = -1.0
    h22 = -1.0
    h12 = 0.0
    for _ in range(60):
        # central differences for gradient and Hessian of g at (u1, u2)
        if act1:
            gp, ok1 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                               rel_times, y4, lvl, below, lvl_floor,
                               u1 + hfd, u2, h0, growth, hmax, states)
            gm, ok2 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                               rel_times, y4, lvl, below, lvl_floor,
                               u1 - hfd, u2, h0, growth, hmax, states)
            if not (ok1 and ok2):
                return 0.0, 0, 1, u1, u2, False
            g1 = (gp - gm) / (2.0 * hfd)
            h11 = (gp - 2.0 * g0 + gm) / (hfd * hfd)
        if act2:
            gp, ok1 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                               rel_times, y4, lvl, below, lvl_floor,
                               u1, u2 + hfd, h0, growth, hmax, states)
            gm, ok2 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                               rel_times, y4, lvl, below, lvl_floor,
                               u1, u2 - hfd, h0, growth, hmax, states)
            if not (ok1 and ok2):
                return 0.0, 0, 1, u1, u2, False
            g2 = (gp - gm) / (2.0 * hfd)
            h22 = (gp - 2.0 * g0 + gm) / (hfd * hfd)
        if act1 and act2:
            gpp, ok1 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                                rel_times, y4, lvl, below, lvl_floor,
                                u1 + hfd, u2 + hfd, h0, growth, hmax, states)
            gpm, ok2 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                                rel_times, y4, lvl, below, lvl_floor,
                                u1 + hfd, u2 - hfd, h0, growth, hmax, states)
            gmp, ok3 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                                rel_times, y4, lvl, below, lvl_floor,
                                u1 - hfd, u2 + hfd, h0, growth, hmax, states)
            gmm, ok4 = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                                rel_times, y4, lvl, below, lvl_floor,
                                u1 - hfd, u2 - hfd, h0, growth, hmax, states)
            if not (ok1 and ok2 and ok3 and ok4):
                return 0.0, 0, 1, u1, u2, False
            h12 = (gpp - gpm - gmp + gmm) / (4.0 * hfd * hfd)

        gnorm = max(abs(g1) if act1 else 0.0, abs(g2) if act2 else 0.0)
        if gnorm < 1e-9 * (1.0 + abs(g0)):
            break

        # ascent direction from the (negated, PD-repaired) Hessian
        a = -h11
        b = -h12
        c = -h22
        if act1 and act2:
            tr = a + c
            det = a * c - b * b
            disc = math.sqrt(max(0.0, tr * tr / 4.0 - det))
            lmin = tr / 2.0 - disc
            if lmin < 1e-8:
                rdg = 1e-8 - lmin
                a += rdg
                c += rdg
            det = a * c - b * b
            d1 = (c * g1 - b * g2) / det
            d2 = (a * g2 - b * g1) / det
        elif act1:
            if a < 1e-8:
                a = 1e-8
            d1 = g1 / a
            d2 = 0.0
        else:
            if c < 1e-8:
                c = 1e-8
            d1 = 0.0
            d2 = g2 / c

        step = 1.0
        improved = False
        for _ls in range(25):
            t1 = u1 + step * d1
            t2 = u2 + step * d2
            if t1 > cap1:
                t1 = cap1
            if t1 < -cap1:
                t1 = -cap1
            if act2:
                if t2 > cap2:
                    t2 = cap2
                if t2 < -cap2:
                    t2 = -cap2
            gt, okt = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                               rel_times, y4, lvl, below, lvl_floor,
                               t1, t2, h0, growth, hmax, states)
            if okt and gt > g0:
                u1 = t1
                u2 = t2
                g0 = gt
                improved = True
                break
            step *= 0.5
        if not improved:
            break

    # quadrature covariance from the negated Hessian at the mode
    a = -h11
    b = -h12 if (act1 and act2) else 0.0
    c = -h22
    if act1 and act2:
        tr = a + c
        det = a * c - b * b
        disc = math.sqrt(max(0.0, tr * tr / 4.0 - det))
        lmin = tr / 2.0 - disc
        if lmin < 1e-8:
            rdg = 1e-8 - lmin
            a += rdg
            c += rdg
        det = a * c - b * b
        s11 = c / det
        s12 = -b / det
        s22 = a / det
        l11 = math.sqrt(s11)
        l21 = s12 / l11
        l22 = math.sqrt(max(s22 - l21 * l21, 1e-300))
        logdet_l = math.log(l11) + math.log(l22)
    elif act1:
        if a < 1e-8:
            a = 1e-8
        l11 = math.sqrt(1.0 / a)
        l21 = 0.0
        l22 = 0.0
        logdet_l = math.log(l11)
    else:
        if c < 1e-8:
            c = 1e-8
        l11 = 0.0
        l21 = 0.0
        l22 = math.sqrt(1.0 / c)
        logdet_l = math.log(l22)

    q = zq.shape[0]
    sq2 = math.sqrt(2.0)
    n_nodes = 0
    n_fail = 0
    vmax = -1e308
    vals = np.empty(q * q)
    wts = np.empty(q * q)
    nv = 0
    if act1 and act2:
        for i in range(q):
            for j in range(q):
                n_nodes += 1
                un1 = u1 + sq2 * l11 * zq[i]
                un2 = u2 + sq2 * (l21 * zq[i] + l22 * zq[j])
                gv, okv = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                                   rel_times, y4, lvl, below, lvl_floor,
                                   un1, un2, h0, growth, hmax, states)
                if not okv:
                    n_fail += 1
                    continue
                vals[nv] = gv + zq[i] * zq[i] + zq[j] * zq[j]
                wts[nv] = wq[i] * wq[j]
                if vals[nv] > vmax:
                    vmax = vals[nv]
                nv += 1
        log_jac = math.log(2.0) + logdet_l
    else:
        for i in range(q):
            n_nodes += 1
            if act1:
                un1 = u1 + sq2 * l11 * zq[i]
                un2 = 0.0
            else:
                un1 = 0.0
                un2 = u2 + sq2 * l22 * zq[i]
            gv, okv = _joint_g(pop9, beta, om1, om2, sig1, sig2, n_pre,
                               rel_times, y4, lvl, below, lvl_floor,
                               un1, un2, h0, growth, hmax, states)
            if not okv:
                n_fail += 1
                continue
            vals[nv] = gv + zq[i] * zq[i]
            wts[nv] = wq[i]
            if vals[nv] > vmax:
                vmax = vals[nv]
            nv += 1
        log_jac = 0.5 * math.log(2.0) + logdet_l

    if nv == 0:
        return 0.0, n_fail, n_nodes, u1, u2, False
    s = 0.0
    for k in range(nv):
        s += wts[k] * math.exp(vals[k] - vmax)
    ll = vmax + math.log(s) + log_jac
    return ll, n_fail, n_nodes, u1, u2, True


@njit(cache=True)
def cohort_loglik(pop9, beta, om1, om2, sig1, sig2,
                  n_pre_arr, obs_offsets, t_rel_flat, y4_flat, lvl_flat,
                  below_flat, lvl_floor, zq, wq, h0, growth, hmax,
                  u_warm, out_ll, out_fail, out_nodes):
    """Fill per-patient marginal log-likelihoods (fixed patient order).

    Patient p owns flat slice [obs_offsets[p], obs_offsets[p+1]); its first
    n_pre_arr[p] visits precede treatment, the remainder carry times relative
    to initiation in t_rel_flat. u_warm (n x 2) seeds and receives the
    per-patient posterior modes.
    """
    n = n_pre_arr.shape[0]
    all_ok = True
    for pidx in range(n):
        lo = obs_offsets[pidx]
        hi = obs_offsets[pidx + 1]
        n_pre = n_pre_arr[pidx]
        ll, nf, nn, m1, m2, ok = patient_marginal_loglik(
            pop9, beta, om1, om2, sig1, sig2,
            n_pre, t_rel_flat[lo + n_pre:hi], y4_flat[lo:hi],
            lvl_flat[lo:hi], below_flat[lo:hi], lvl_floor,
            zq, wq, h0, growth, hmax, u_warm[pidx])
        out_ll[pidx] = ll
        out_fail[pidx] = nf
        out_nodes[pidx] = nn
        u_warm[pidx, 0] = m1
        u_warm[pidx, 1] = m2
        if not ok or (nn > 0 and nf * 4 > nn):
            all_ok = False
    return all_ok
