"""Compiled per-dataset loops: EP log-likelihood, Laplace modes and adaptive
Gauss-Hermite quadrature.

Data arrive packed (see ``PackedData``).  Probit sites are rank one in
``c = (2y - 1) xR``, so each site is stored as two scalars ``(p, q)`` meaning
``eta1 = p c`` and quadratic coefficient matrix ``q c c^T``.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .special import _log_norm_cdf, _zeta_all

_LOG_2PI = math.log(2.0 * math.pi)


@numba.njit(cache=True)
def _chol(M, L):
    """Lower Cholesky factor of SPD ``M`` into ``L``; False if not SPD."""
    d = M.shape[0]
    for j in range(d):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > 0.0):
            return False
        L[j, j] = math.sqrt(s)
        for i in range(j + 1, d):
            t = M[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / L[j, j]
        for i in range(j):
            L[i, j] = 0.0
    return True


@numba.njit(cache=True)
def _chol_solve(L, b, out):
    d = L.shape[0]
    for i in range(d):
        t = b[i]
        for k in range(i):
            t -= L[i, k] * out[k]
        out[i] = t / L[i, i]
    for i in range(d - 1, -1, -1):
        t = out[i]
        for k in range(i + 1, d):
            t -= L[k, i] * out[k]
        out[i] = t / L[i, i]


@numba.njit(cache=True)
def _chol_logdet(L):
    s = 0.0
    for i in range(L.shape[0]):
        s += math.log(L[i, i])
    return 2.0 * s


@numba.njit(cache=True)
def _neg_a_n(Q, h, L, tmp):
    """Log-normaliser of exp(x^T h + x^T Q x); returns (value, ok)."""
    d = Q.shape[0]
    M = -Q
    if not _chol(M, L):
        return 0.0, False
    _chol_solve(L, h, tmp)
    quad = 0.0
    for k in range(d):
        quad += h[k] * tmp[k]
    return 0.25 * quad - 0.5 * (d * math.log(2.0) + _chol_logdet(L)), True


@numba.njit(cache=True)
def _site_totals(Q0, C, p, q, Qtot, htot):
    d = Q0.shape[0]
    for a in range(d):
        htot[a] = 0.0
        for b in range(d):
            Qtot[a, b] = Q0[a, b]
    for j in range(C.shape[0]):
        for a in range(d):
            htot[a] += p[j] * C[j, a]
            for b in range(d):
                Qtot[a, b] += q[j] * C[j, a] * C[j, b]


@numba.njit(cache=True)
def _cavity_scalars(Qtot, htot, c, pj, qj, Qcav, hcav, L, tmp):
    """(s, w) = (c^T Qcav^{-1} c, c^T Qcav^{-1} hcav) for the cavity of one site."""
    d = Qtot.shape[0]
    for a in range(d):
        hcav[a] = htot[a] - pj * c[a]
        for b in range(d):
            Qcav[a, b] = -(Qtot[a, b] - qj * c[a] * c[b])
    if not _chol(Qcav, L):
        return 0.0, 0.0, False
    _chol_solve(L, c, tmp)
    s = 0.0
    w = 0.0
    for a in range(d):
        s -= c[a] * tmp[a]
        w -= hcav[a] * tmp[a]
    # restore the sign so Qcav holds the cavity coefficient matrix
    for a in range(d):
        for b in range(d):
            Qcav[a, b] = -Qcav[a, b]
    return s, w, True


@numba.njit(cache=True)
def _site_change(c, p_old, q_old, p_new, q_new):
    d = c.shape[0]
    delta = 0.0
    for a in range(d):
        old = p_old * c[a]
        ch = abs(p_new * c[a] - old) / (1.0 + abs(old))
        if ch > delta:
            delta = ch
    for b in range(d):
        for a in range(b, d):
            f = 1.0 if a == b else 2.0
            old = f * q_old * c[a] * c[b]
            ch = abs(f * q_new * c[a] * c[b] - old) / (1.0 + abs(old))
            if ch > delta:
                delta = ch
    return delta


@numba.njit(cache=True)
def _ep_group(c0, C, Q0, p, q, tol, max_iter, literal, Qtot, htot, Qcav, hcav, L, tmp):
    """Run the site sweeps for one group in place; returns (converged, iterations, skipped)."""
    n = C.shape[0]
    _site_totals(Q0, C, p, q, Qtot, htot)
    skipped = 0
    converged = False
    it = 0
    Qfro = Qtot.copy()
    hfro = htot.copy()
    while it < max_iter:
        it += 1
        delta = 0.0
        if literal:
            Qfro[:, :] = Qtot
            hfro[:] = htot
        for j in range(n):
            c = C[j]
            if literal:
                s, w, ok = _cavity_scalars(Qfro, hfro, c, p[j], q[j], Qcav, hcav, L, tmp)
            else:
                s, w, ok = _cavity_scalars(Qtot, htot, c, p[j], q[j], Qcav, hcav, L, tmp)
            if not ok:
                skipped += 1
                continue
            r1 = math.sqrt(2.0 * (2.0 - s))
            r2 = (2.0 * c0[j] - w) / r1
            z1, z2 = _zeta_all(r2)
            r3 = 2.0 * z1 / r1
            r4 = -2.0 * z2 / (r1 * r1)
            den = 1.0 + r4 * s
            if not (den > 0.0):
                skipped += 1
                continue
            q_new = -r4 / den
            p_new = r3 - r4 * (w + r3 * s) / den
            ch = _site_change(c, p[j], q[j], p_new, q_new)
            if ch > delta:
                delta = ch
            if not literal:
                dq = q_new - q[j]
                dp = p_new - p[j]
                for a in range(c.shape[0]):
                    htot[a] += dp * c[a]
                    for b in range(c.shape[0]):
                        Qtot[a, b] += dq * c[a] * c[b]
            p[j] = p_new
            q[j] = q_new
        if literal:
            _site_totals(Q0, C, p, q, Qtot, htot)
        if delta < tol:
            converged = True
            break
    _site_totals(Q0, C, p, q, Qtot, htot)
    return converged, it, skipped


@numba.njit(cache=True)
def _group_constants(y, XF, XR, lo, hi, beta):
    n = hi - lo
    d = XR.shape[1]
    c0 = np.empty(n)
    C = np.empty((n, d))
    for j in range(n):
        s = 2.0 * y[lo + j] - 1.0
        eta = 0.0
        for k in range(XF.shape[1]):
            eta += XF[lo + j, k] * beta[k]
        c0[j] = s * eta
        for a in range(d):
            C[j, a] = s * XR[lo + j, a]
    return c0, C


@numba.njit(cache=True)
def ep_dataset(y, XF, XR, offsets, beta, Sigma_inv, logdet_Sigma, uhat, tol, max_iter, literal,
               out_ll, out_conv, out_iter, out_skip, out_mean, out_cov):
    """EP log-likelihood contributions of every group, starting from the
    Taylor-expansion sites at ``uhat``."""
    m = offsets.shape[0] - 1
    d = XR.shape[1]
    Q0 = -0.5 * Sigma_inv
    prior_eta0 = -0.5 * (d * _LOG_2PI + logdet_Sigma)
    Qtot = np.empty((d, d))
    htot = np.empty(d)
    Qcav = np.empty((d, d))
    hcav = np.empty(d)
    L = np.zeros((d, d))
    tmp = np.empty(d)
    for i in range(m):
        lo = offsets[i]
        hi = offsets[i + 1]
        n = hi - lo
        c0, C = _group_constants(y, XF, XR, lo, hi, beta)
        p = np.empty(n)
        q = np.empty(n)
        for j in range(n):
            cu = 0.0
            for a in range(d):
                cu += C[j, a] * uhat[i, a]
            z1, z2 = _zeta_all(c0[j] + cu)
            p[j] = z1 - z2 * cu
            q[j] = 0.5 * z2
        conv, it, skipped = _ep_group(c0, C, Q0, p, q, tol, max_iter, literal, Qtot, htot, Qcav, hcav, L, tmp)
        out_conv[i] = conv
        out_iter[i] = it
        out_skip[i] = skipped
        an_tot, ok = _neg_a_n(Qtot, htot, L, tmp)
        if not ok:
            out_ll[i] = np.nan
            out_conv[i] = False
            continue
        # posterior moments: cov = (-2 Q)^{-1}, mean = cov h
        _chol_solve(L, htot, tmp)
        for a in range(d):
            out_mean[i, a] = 0.5 * tmp[a]
        e = np.zeros(d)
        for b in range(d):
            e[:] = 0.0
            e[b] = 1.0
            _chol_solve(L, e, tmp)
            for a in range(d):
                out_cov[i, a, b] = 0.5 * tmp[a]
        total = 0.5 * d * _LOG_2PI + prior_eta0 + an_tot
        for j in range(n):
            s, w, okc = _cavity_scalars(Qtot, htot, C[j], p[j], q[j], Qcav, hcav, L, tmp)
            if not okc:
                total = np.nan
                break
            r2 = (2.0 * c0[j] - w) / math.sqrt(2.0 * (2.0 - s))
            an_cav, okc = _neg_a_n(Qcav, hcav, L, tmp)
            if not okc:
                total = np.nan
                break
            total += _log_norm_cdf(r2) + an_cav - an_tot
        out_ll[i] = total


@numba.njit(cache=True)
def laplace_dataset(y, XF, XR, offsets, beta, Sigma_inv, logdet_Sigma, u0, max_newton,
                    out_mode, out_ll, out_negH, out_ok):
    """Newton maximisation of sum_j log Phi(a_j(u)) - u^T Sigma^{-1} u / 2 per group."""
    m = offsets.shape[0] - 1
    d = XR.shape[1]
    L = np.zeros((d, d))
    step = np.empty(d)
    grad = np.empty(d)
    H = np.empty((d, d))
    u = np.empty(d)
    trial = np.empty(d)
    for i in range(m):
        lo = offsets[i]
        hi = offsets[i + 1]
        c0, C = _group_constants(y, XF, XR, lo, hi, beta)
        n = hi - lo
        for a in range(d):
            u[a] = u0[i, a]
        f = _laplace_obj(c0, C, Sigma_inv, u)
        ok = False
        for it in range(max_newton):
            # gradient and negative Hessian
            for a in range(d):
                g = 0.0
                for b in range(d):
                    g -= Sigma_inv[a, b] * u[b]
                    H[a, b] = Sigma_inv[a, b]
                grad[a] = g
            for j in range(n):
                aj = c0[j]
                for a in range(d):
                    aj += C[j, a] * u[a]
                z1, z2 = _zeta_all(aj)
                for a in range(d):
                    grad[a] += z1 * C[j, a]
                    for b in range(d):
                        H[a, b] -= z2 * C[j, a] * C[j, b]
            gmax = 0.0
            for a in range(d):
                gmax = max(gmax, abs(grad[a]))
            if gmax < 1e-10:
                ok = True
                break
            if not _chol(H, L):
                break
            _chol_solve(L, grad, step)
            dec = 0.0
            for a in range(d):
                dec += grad[a] * step[a]
            t = 1.0
            improved = False
            if dec < 1e-8 * (1.0 + abs(f)):
                # quadratic regime: f is flat to rounding, take the full step
                for a in range(d):
                    trial[a] = u[a] + step[a]
                ft = _laplace_obj(c0, C, Sigma_inv, trial)
                improved = True
            for _ in range(0 if improved else 21):
                for a in range(d):
                    trial[a] = u[a] + t * step[a]
                ft = _laplace_obj(c0, C, Sigma_inv, trial)
                if ft >= f:
                    improved = True
                    break
                t *= 0.5
            if not improved:
                # no ascent possible at machine precision: accept as stationary
                ok = dec < 1e-8 * (1.0 + abs(f))
                break
            smax = 0.0
            umax = 0.0
            for a in range(d):
                smax = max(smax, abs(trial[a] - u[a]))
                umax = max(umax, abs(trial[a]))
                u[a] = trial[a]
            f = ft
            if smax <= 1e-13 * (1.0 + umax):
                ok = dec < 1e-8 * (1.0 + abs(f))
                break
        # curvature at the final point
        for a in range(d):
            for b in range(d):
                H[a, b] = Sigma_inv[a, b]
        for j in range(n):
            aj = c0[j]
            for a in range(d):
                aj += C[j, a] * u[a]
            z1, z2 = _zeta_all(aj)
            for a in range(d):
                for b in range(d):
                    H[a, b] -= z2 * C[j, a] * C[j, b]
        for a in range(d):
            out_mode[i, a] = u[a]
            for b in range(d):
                out_negH[i, a, b] = H[a, b]
        if _chol(H, L):
            out_ll[i] = f - 0.5 * logdet_Sigma - 0.5 * _chol_logdet(L)
        else:
            out_ll[i] = np.nan
            ok = False
        out_ok[i] = ok


@numba.njit(cache=True)
def _laplace_obj(c0, C, Sigma_inv, u):
    d = u.shape[0]
    f = 0.0
    for a in range(d):
        for b in range(d):
            f -= 0.5 * u[a] * Sigma_inv[a, b] * u[b]
    for j in range(C.shape[0]):
        aj = c0[j]
        for a in range(d):
            aj += C[j, a] * u[a]
        f += _log_norm_cdf(aj)
    return f


@numba.njit(cache=True)
def aghq_dataset(y, XF, XR, offsets, beta, Sigma_inv, logdet_Sigma, modes, negH,
                 nodes, logw, out_ll, out_mean, out_cov):
    """Adaptive Gauss-Hermite log-likelihood and posterior moments per group.

    The tensor rule is recentred at ``modes[i]`` and scaled by the Cholesky
    factor of ``negH[i]^{-1}``.
    """
    m = offsets.shape[0] - 1
    d = XR.shape[1]
    K = nodes.shape[0]
    total_nodes = K**d
    L = np.zeros((d, d))
    S = np.empty((d, d))
    Linv = np.zeros((d, d))
    e = np.empty(d)
    col = np.empty(d)
    u = np.empty(d)
    idx = np.empty(d, dtype=np.int64)
    logvals = np.empty(total_nodes)
    us = np.empty((total_nodes, d))
    for i in range(m):
        lo = offsets[i]
        hi = offsets[i + 1]
        c0, C = _group_constants(y, XF, XR, lo, hi, beta)
        # scale = chol(negH^{-1})
        if not _chol(negH[i], L):
            out_ll[i] = np.nan
            continue
        for b in range(d):
            e[:] = 0.0
            e[b] = 1.0
            _chol_solve(L, e, col)
            for a in range(d):
                S[a, b] = col[a]
        if not _chol(S, Linv):
            out_ll[i] = np.nan
            continue
        log_jac = 0.5 * d * math.log(2.0) + 0.5 * _chol_logdet(Linv)
        idx[:] = 0
        for k in range(total_nodes):
            rem = k
            lw = 0.0
            for a in range(d):
                idx[a] = rem % K
                rem //= K
                lw += logw[idx[a]] + nodes[idx[a]] * nodes[idx[a]]
            for a in range(d):
                v = modes[i, a]
                for b in range(a + 1):
                    v += math.sqrt(2.0) * Linv[a, b] * nodes[idx[b]]
                u[a] = v
                us[k, a] = v
            logvals[k] = lw + _laplace_obj(c0, C, Sigma_inv, u)
        mx = -np.inf
        for k in range(total_nodes):
            if logvals[k] > mx:
                mx = logvals[k]
        ssum = 0.0
        for k in range(total_nodes):
            logvals[k] = math.exp(logvals[k] - mx)
            ssum += logvals[k]
        out_ll[i] = mx + math.log(ssum) + log_jac - 0.5 * (d * _LOG_2PI + logdet_Sigma)
        for a in range(d):
            acc = 0.0
            for k in range(total_nodes):
                acc += logvals[k] * us[k, a]
            out_mean[i, a] = acc / ssum
        for a in range(d):
            for b in range(d):
                acc = 0.0
                for k in range(total_nodes):
                    acc += logvals[k] * (us[k, a] - out_mean[i, a]) * (us[k, b] - out_mean[i, b])
                out_cov[i, a, b] = acc / ssum
