# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled Newton solver for per-cell binary distribution regressions.

One "cell" is a (unit, threshold) pair: a T x d design with a 0/1 success
vector. Cells within a unit share the design, so the batch entry point takes
one design and a stack of indicator rows and can warm-start each cell from
the previous solution (thresholds are fit in increasing order).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erfc, exp, fabs, log, log1p, sqrt

cnp.import_array()

cdef double PROB_CLIP = 1e-12
cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327

cdef inline double _clip01(double p) nogil:
    if p < PROB_CLIP:
        return PROB_CLIP
    if p > 1.0 - PROB_CLIP:
        return 1.0 - PROB_CLIP
    return p

cdef inline double _logit_cdf(double s) nogil:
    cdef double e
    if s >= 0.0:
        return 1.0 / (1.0 + exp(-s))
    e = exp(s)
    return e / (1.0 + e)

cdef inline double _probit_cdf(double s) nogil:
    return 0.5 * erfc(-s * INV_SQRT2)

cdef inline double _normpdf(double s) nogil:
    return exp(-0.5 * s * s) * INV_SQRT_2PI


cdef double _loglik(double[:, ::1] X, cnp.uint8_t[:] b, double[:] beta,
                    int link_id, int t0, int t1, int d) nogil:
    cdef double ll = 0.0, s, p
    cdef int t, j
    for t in range(t0, t1):
        s = 0.0
        for j in range(d):
            s -= X[t, j] * beta[j]
        if link_id == 0:
            p = _logit_cdf(s)
        else:
            p = _probit_cdf(s)
        p = _clip01(p)
        if b[t]:
            ll += log(p)
        else:
            ll += log1p(-p)
    return ll


cdef void _grad_hess(double[:, ::1] X, cnp.uint8_t[:] b, double[:] beta,
                     int link_id, int t0, int t1, int d,
                     double[:] gm, double[:, :] W) nogil:
    # gm = sum_t u_t x_t (gradient wrt beta is -gm); W = sum_t w_t x_t x_t'
    cdef double s, p, phi, u, w, r
    cdef int t, j, k
    for j in range(d):
        gm[j] = 0.0
        for k in range(d):
            W[j, k] = 0.0
    for t in range(t0, t1):
        s = 0.0
        for j in range(d):
            s -= X[t, j] * beta[j]
        if link_id == 0:
            p = _logit_cdf(s)
            u = (1.0 if b[t] else 0.0) - p
            w = p * (1.0 - p)
            if w < 1e-290:
                w = 1e-290
        else:
            p = _clip01(_probit_cdf(s))
            phi = _normpdf(s)
            if b[t]:
                r = phi / p
                u = r
                w = r * (s + r)
            else:
                r = phi / (1.0 - p)
                u = -r
                w = r * (r - s)
            if w < 1e-290:
                w = 1e-290
        for j in range(d):
            gm[j] += u * X[t, j]
            for k in range(j, d):
                W[j, k] += w * X[t, j] * X[t, k]
    for j in range(d):
        for k in range(j):
            W[j, k] = W[k, j]


cdef int _chol_solve(double[:, :] W, double[:] rhs, double[:] out,
                     double[:, :] L, int d, double* cond_proxy) nogil:
    # Cholesky of W (PD expected); returns 0 on success. cond_proxy gets
    # (max diag L / min diag L)^2 as a cheap condition estimate.
    cdef int i, j, k
    cdef double acc, dmin = 1e300, dmax = 0.0
    for i in range(d):
        for j in range(i + 1):
            acc = W[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            if i == j:
                if acc <= 0.0:
                    return 1
                L[i, i] = sqrt(acc)
                if L[i, i] < dmin:
                    dmin = L[i, i]
                if L[i, i] > dmax:
                    dmax = L[i, i]
            else:
                L[i, j] = acc / L[j, j]
    cond_proxy[0] = (dmax / dmin) * (dmax / dmin)
    # forward then backward substitution
    for i in range(d):
        acc = rhs[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]
    for i in range(d - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, d):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]
    return 0


def fit_cells(double[:, ::1] X, cnp.uint8_t[:, ::1] B, int link_id,
              int max_iter, double tol, double sep_norm,
              bint warm_chain=True, int t0=0, int t1=-1):
    """Fit all indicator rows of B against the shared design X.

    Returns (betas, statuses, logliks, niters); status codes are
    0=converged, 1=separated, 2=max_iter, 3=numerical failure.
    """
    cdef int T = X.shape[0], d = X.shape[1], nc = B.shape[0]
    if t1 < 0:
        t1 = T
    cdef int nt = t1 - t0
    betas_arr = np.zeros((nc, d))
    status_arr = np.zeros(nc, dtype=np.int32)
    ll_arr = np.zeros(nc)
    it_arr = np.zeros(nc, dtype=np.int32)
    cdef double[:, ::1] betas = betas_arr
    cdef int[::1] status = status_arr
    cdef double[::1] lls = ll_arr
    cdef int[::1] its = it_arr

    work = np.zeros((5, d))
    Wm = np.zeros((d, d))
    Lm = np.zeros((d, d))
    cdef double[:] beta = work[0]
    cdef double[:] gm = work[1]
    cdef double[:] delta = work[2]
    cdef double[:] btry = work[3]
    cdef double[:, :] W = Wm
    cdef double[:, :] L = Lm

    cdef int c, j, it, halve, solved
    cdef double ll, ll_try, gnorm, step, bn, cond, wtr
    cdef int stat

    with nogil:
        for c in range(nc):
            if not (warm_chain and c > 0):
                for j in range(d):
                    beta[j] = 0.0
            # else: keep previous cell's solution as the starting point
            stat = 2
            ll = _loglik(X, B[c], beta, link_id, t0, t1, d)
            for it in range(max_iter):
                _grad_hess(X, B[c], beta, link_id, t0, t1, d, gm, W)
                gnorm = 0.0
                for j in range(d):
                    if fabs(gm[j]) > gnorm:
                        gnorm = fabs(gm[j])
                if gnorm / nt < tol:
                    stat = 0
                    break
                # Newton ascent direction solves W delta = -gm
                for j in range(d):
                    delta[j] = -gm[j]
                solved = _chol_solve(W, delta, delta, L, d, &cond)
                if solved != 0 or cond > 1e10:
                    # ill-conditioned Hessian: scaled gradient ascent step
                    wtr = 0.0
                    for j in range(d):
                        wtr += W[j, j]
                    wtr = wtr / d + 1e-10
                    for j in range(d):
                        delta[j] = -gm[j] / wtr
                step = 1.0
                for halve in range(40):
                    for j in range(d):
                        btry[j] = beta[j] + step * delta[j]
                    ll_try = _loglik(X, B[c], btry, link_id, t0, t1, d)
                    if ll_try > ll:
                        break
                    step *= 0.5
                if ll_try <= ll:
                    # no ascent possible along this direction
                    stat = 0 if gnorm / nt < sqrt(tol) else 3
                    break
                for j in range(d):
                    beta[j] = btry[j]
                ll = ll_try
                bn = 0.0
                for j in range(d):
                    bn += beta[j] * beta[j]
                if sqrt(bn) > sep_norm:
                    stat = 1
                    break
            lls[c] = ll
            its[c] = it + 1
            status[c] = stat
            for j in range(d):
                betas[c, j] = beta[j]
            if stat == 1 or stat == 3:
                # do not chain a bad point into the next cell
                for j in range(d):
                    beta[j] = 0.0

    return betas_arr, status_arr, ll_arr, it_arr
