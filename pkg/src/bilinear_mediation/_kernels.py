"""Compiled per-individual Gaussian log-densities.

Observations of individual ``i`` are modelled as ``z_i = L_i eta_i + e_i`` with
``eta_i ~ N(mu_i, S)`` and ``e_i ~ N(0, R kron I_J)``. The density is evaluated
through the Woodbury identity and the matrix determinant lemma so that only a
``3P x 3P`` matrix is factorised per individual.
"""
import math

import numba
import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


@numba.njit(cache=True)
def individual_logliks(times, values, knots, cond_mean, sigma_inv, logdet_sigma,
                       r_inv, logdet_r):
    """Per-individual log-densities; ``-inf`` where the factorisation fails.

    times, values : (n, P, J)
    knots         : (P,)
    cond_mean     : (n, 3P) growth-factor means for each individual
    sigma_inv     : (3P, 3P) inverse growth-factor covariance
    r_inv         : (P, P) inverse per-occasion residual covariance
    """
    n, n_proc, n_occ = times.shape
    k = 3 * n_proc
    out = np.empty(n)
    lam = np.empty((n_proc, n_occ, 3))
    resid = np.empty((n_proc, n_occ))
    scaled = np.empty((n_proc, n_occ))
    u = np.empty(k)
    m = np.empty((k, k))
    chol = np.zeros((k, k))
    const = n_proc * n_occ * LOG_2PI + n_occ * logdet_r + logdet_sigma
    for i in range(n):
        for p in range(n_proc):
            for j in range(n_occ):
                d = times[i, p, j] - knots[p]
                lo = d if d < 0.0 else 0.0
                hi = d if d > 0.0 else 0.0
                lam[p, j, 0] = lo
                lam[p, j, 1] = 1.0
                lam[p, j, 2] = hi
                mu = cond_mean[i, 3 * p]
                resid[p, j] = values[i, p, j] - (lo * mu + cond_mean[i, 3 * p + 1]
                                                 + hi * cond_mean[i, 3 * p + 2])
        quad = 0.0
        for p in range(n_proc):
            for j in range(n_occ):
                s = 0.0
                for q in range(n_proc):
                    s += r_inv[p, q] * resid[q, j]
                scaled[p, j] = s
                quad += s * resid[p, j]
        for p in range(n_proc):
            for a in range(3):
                s = 0.0
                for j in range(n_occ):
                    s += lam[p, j, a] * scaled[p, j]
                u[3 * p + a] = s
        for r in range(k):
            for c in range(k):
                m[r, c] = sigma_inv[r, c]
        for p in range(n_proc):
            for q in range(n_proc):
                w = r_inv[p, q]
                for a in range(3):
                    for b in range(3):
                        s = 0.0
                        for j in range(n_occ):
                            s += lam[p, j, a] * lam[q, j, b]
                        m[3 * p + a, 3 * q + b] += w * s
        ok = True
        logdet_m = 0.0
        for r in range(k):
            for c in range(r + 1):
                s = m[r, c]
                for t in range(c):
                    s -= chol[r, t] * chol[c, t]
                if r == c:
                    if s <= 0.0:
                        ok = False
                        break
                    chol[r, r] = math.sqrt(s)
                    logdet_m += 2.0 * math.log(chol[r, r])
                else:
                    chol[r, c] = s / chol[c, c]
            if not ok:
                break
        if not ok:
            out[i] = -np.inf
            continue
        # forward solve chol w = u; quad correction is w.w
        corr = 0.0
        for r in range(k):
            s = u[r]
            for t in range(r):
                s -= chol[r, t] * u[t]
            u[r] = s / chol[r, r]
            corr += u[r] * u[r]
        out[i] = -0.5 * (const + logdet_m + quad - corr)
    return out
