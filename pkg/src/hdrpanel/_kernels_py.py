"""Pure-numpy fallback for the compiled cell solver.

Same contract as the Cython module ``hdrpanel._kernels``: fit a stack of
binary regressions sharing one design. Slower (python-level iteration per
cell) but dependency-free; selected automatically when the extension is
not built. ``benchmarks/bench_kernels.py`` compares the two.
"""

from __future__ import annotations

import numpy as np

from .links import clip_prob

_STATUS_CONVERGED = 0
_STATUS_SEPARATED = 1
_STATUS_MAXITER = 2
_STATUS_NUMERICAL = 3

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def _logit_weights(s, b):
    p = 1.0 / (1.0 + np.exp(-np.clip(s, -700, 700)))
    u = b - p
    w = np.maximum(p * (1.0 - p), 1e-290)
    return p, u, w


def _probit_weights(s, b):
    from scipy.special import ndtr

    p = clip_prob(ndtr(s))
    phi = np.exp(-0.5 * s * s) / _SQRT_2PI
    r1 = phi / p
    r0 = phi / (1.0 - p)
    u = np.where(b, r1, -r0)
    w = np.where(b, r1 * (s + r1), r0 * (r0 - s))
    return p, u, w


def _loglik(p, b):
    p = clip_prob(p)
    return float(np.sum(np.where(b, np.log(p), np.log1p(-p))))


def fit_cells(X, B, link_id, max_iter, tol, sep_norm, warm_chain=True, t0=0, t1=-1):
    """Newton with step-halving per cell; see the compiled twin for codes."""
    X = np.ascontiguousarray(X, dtype=float)
    B = np.asarray(B)
    T, d = X.shape
    if t1 < 0:
        t1 = T
    Xw = X[t0:t1]
    nt = t1 - t0
    nc = B.shape[0]
    betas = np.zeros((nc, d))
    status = np.full(nc, _STATUS_MAXITER, dtype=np.int32)
    lls = np.zeros(nc)
    its = np.zeros(nc, dtype=np.int32)
    weights = _logit_weights if link_id == 0 else _probit_weights

    beta = np.zeros(d)
    for c in range(nc):
        b = B[c, t0:t1].astype(bool)
        if not (warm_chain and c > 0):
            beta = np.zeros(d)
        else:
            beta = beta.copy()
        s = -Xw @ beta
        p, u, w = weights(s, b)
        ll = _loglik(p, b)
        stat = _STATUS_MAXITER
        it = 0
        for it in range(max_iter):
            gm = Xw.T @ u
            if np.max(np.abs(gm)) / nt < tol:
                stat = _STATUS_CONVERGED
                break
            W = (Xw * w[:, None]).T @ Xw
            try:
                cond = np.linalg.cond(W)
                if not np.isfinite(cond) or cond > 1e10:
                    raise np.linalg.LinAlgError
                delta = np.linalg.solve(W, -gm)
            except np.linalg.LinAlgError:
                delta = -gm / (np.trace(W) / d + 1e-10)
            step = 1.0
            improved = False
            for _ in range(40):
                btry = beta + step * delta
                s = -Xw @ btry
                p, u_try, w_try = weights(s, b)
                ll_try = _loglik(p, b)
                if ll_try > ll:
                    improved = True
                    break
                step *= 0.5
            if not improved:
                stat = _STATUS_CONVERGED if np.max(np.abs(gm)) / nt < np.sqrt(tol) else _STATUS_NUMERICAL
                break
            beta, ll, u, w = btry, ll_try, u_try, w_try
            if np.linalg.norm(beta) > sep_norm:
                stat = _STATUS_SEPARATED
                break
        betas[c] = beta
        status[c] = stat
        lls[c] = ll
        its[c] = it + 1
        if stat in (_STATUS_SEPARATED, _STATUS_NUMERICAL):
            beta = np.zeros(d)
    return betas, status, lls, its
