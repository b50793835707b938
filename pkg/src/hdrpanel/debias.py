"""Incidental-parameter bias correction and per-unit variance estimation.

The analytical correction implements the first-order large-T expansion of
the per-unit maximum-likelihood estimator,

    B_i = A1 * sum_{h=0}^{L} E[V_t A1 psi_{t-h}] - (1/2) A1 <A2, A1 Xi A1>,

with A1 the inverse expected Hessian, V_t the centered per-period Hessian,
psi_t the per-period score, A2 the expected third-derivative tensor and Xi
the Bartlett long-run score variance. The cross-moment sum is a plain
truncated sum; the corrected estimator is beta_tilde - B_i / T. Signs and
constants are pinned by the Monte-Carlo oracles in the test suite
(closed-form check: intercept-only logit has T-bias (1-2p) / (2p(1-p))).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._backend import fit_cells
from .drfit import (
    ST_OK,
    CoefficientField,
    DrFit,
    FitOptions,
    fit_field,
    indicator_matrix,
    score_weights,
)
from .links import get_link
from .panel import PanelDesign, ThresholdGrid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LongRunVariance:
    matrix: np.ndarray  # (d, d)
    lags: int


@dataclass(frozen=True)
class UnitSandwich:
    matrix: np.ndarray  # (d, d), variance of sqrt(T)(beta_tilde - beta)


def default_nw_lags(T: int) -> int:
    return int(np.floor(T ** (1.0 / 3.0)))


def newey_west(scores: np.ndarray, lags: int) -> LongRunVariance:
    """Bartlett-weighted long-run variance of a score series (T, d).

    Matches the display used for the plug-in variance components:
    (1/T) sum psi psi' + (1/T) sum_{h=1}^{L} (1 - h/L) sum_{t>h} cross terms.
    """
    psi = np.asarray(scores, dtype=float)
    T = psi.shape[0]
    if lags < 0 or lags >= T:
        raise ValueError(f"need 0 <= lags < T, got lags={lags}, T={T}")
    xi = psi.T @ psi / T
    for h in range(1, lags + 1):
        w = 1.0 - h / lags
        if w == 0.0:
            continue
        c = psi[h:].T @ psi[:-h] / T
        xi = xi + w * (c + c.T)
    return LongRunVariance(matrix=xi, lags=lags)


def sandwich_variance(fit: DrFit, lrv: LongRunVariance) -> UnitSandwich:
    """Sigma_i(y) = H^{-1} Xi H^{-1}, H the average per-period Hessian."""
    if fit.hessian is None:
        raise ValueError("fit carries no Hessian")
    h_inv = np.linalg.inv(fit.hessian)
    return UnitSandwich(matrix=h_inv @ lrv.matrix @ h_inv)


def analytical_bias(fit: DrFit, lrv: LongRunVariance, link, X=None, b=None) -> np.ndarray:
    """First-order bias estimate B_i(y) for one converged cell.

    The design and indicators default to the ones stored on the fit by
    ``fit_unit_threshold``; the long-run variance fixes the truncation lag.
    """
    X = X if X is not None else getattr(fit, "X", None)
    b = b if b is not None else getattr(fit, "b", None)
    if X is None or b is None:
        raise ValueError("analytical_bias needs the cell design and indicators")
    link = get_link(link)
    bias, _, _ = _bias_and_sandwich(
        np.asarray(X, float), np.asarray(b, bool)[None, :], fit.beta[None, :], link, lrv.lags
    )
    return bias[0]


def _bias_and_sandwich(X, B, betas, link, lags):
    """Batched bias vectors, sandwiches, and Xi for cells sharing a design.

    X: (T, d); B: (S, T) bool indicator rows; betas: (S, d).
    Returns (bias (S, d), sandwich (S, d, d), xi (S, d, d)); rows with a
    singular Hessian come back as NaN.
    """
    T, d = X.shape
    S = B.shape[0]
    s_idx = -(X @ betas.T)  # (T, S)
    u, a2, a3 = score_weights(link, s_idx, B.T)
    psi = -u[:, :, None] * X[:, None, :]  # (T, S, d)

    hll = np.einsum("ts,tj,tk->sjk", a2, X, X) / T  # avg d2l, negative definite
    xi = np.einsum("tsj,tsk->sjk", psi, psi) / T
    for h in range(1, lags + 1):
        w = 1.0 - h / lags
        if w == 0.0:
            continue
        c = np.einsum("tsj,tsk->sjk", psi[h:], psi[:-h]) / T
        xi += w * (c + np.transpose(c, (0, 2, 1)))

    ok = np.full(S, True)
    a1 = np.full((S, d, d), np.nan)
    for si in range(S):
        try:
            a1[si] = np.linalg.inv(hll[si])
        except np.linalg.LinAlgError:
            ok[si] = False
    sand = np.einsum("sjk,skl,slm->sjm", a1, xi, a1)

    # spectral cross-moments of centered Hessian and score: plain truncated
    # sum (Bartlett taper left the h=1 term underweighted and a visible
    # residual bias on dynamic designs; the coverage oracle pins this choice)
    a_t = np.einsum("sjk,tsk->tsj", a1, psi)  # (T, S, d)
    phi = np.zeros((S, d))
    for h in range(lags + 1):
        a_lag = a_t[: T - h]
        inner = np.einsum("tk,tsk->ts", X[h:], a_lag)
        term1 = np.einsum("ts,ts,tj->sj", a2[h:], inner, X[h:]) / T
        term2 = np.einsum("sjk,sk->sj", hll, a_lag.sum(axis=0)) / T
        phi += term1 - term2

    # third-derivative curvature contracted against the sandwich
    xmx = np.einsum("tj,sjk,tk->ts", X, sand, X)  # (T, S)
    q = -np.einsum("ts,ts,tj->sj", a3, xmx, X) / T

    bias = np.einsum("sjk,sk->sj", a1, phi) - 0.5 * np.einsum("sjk,sk->sj", a1, q)
    bias[~ok] = np.nan
    sand[~ok] = np.nan
    return bias, sand, xi


def attach_cell_stats(field: CoefficientField, nw_lags: Optional[int] = None) -> CoefficientField:
    """Compute per-cell Xi, sandwich and bias at the current coefficients.

    Returns a new field with ``sandwich`` and ``bias`` arrays populated for
    converged cells; other cells stay NaN.
    """
    N, G, d = field.beta.shape
    sandwich = np.full((N, G, d, d), np.nan)
    bias = np.full((N, G, d), np.nan)
    link = field.link
    for i, u in enumerate(field.design.units):
        T = len(u.y)
        lags = nw_lags if nw_lags is not None else default_nw_lags(T)
        cols = np.where(field.status[i] == ST_OK)[0]
        if cols.size == 0:
            continue
        counts = np.searchsorted(np.sort(u.y), field.grid.points[cols], side="right")
        ucounts, inverse = np.unique(counts, return_inverse=True)
        B = indicator_matrix(u.y, ucounts).astype(bool)
        # one representative column per distinct pattern
        rep = np.zeros(len(ucounts), dtype=int)
        rep[inverse] = cols
        bvec, sand, _ = _bias_and_sandwich(u.X, B, field.beta[i, rep], link, lags)
        bias[i, cols] = bvec[inverse]
        sandwich[i, cols] = sand[inverse]
    return replace(field, sandwich=sandwich, bias=bias, nw_lags=nw_lags)


def debias_analytical(field: CoefficientField, nw_lags: Optional[int] = None) -> CoefficientField:
    """Subtract the estimated first-order bias from every converged cell."""
    if field.debias_method != "none":
        logger.warning("debiasing an already '%s'-corrected field", field.debias_method)
    work = field if field.bias is not None else attach_cell_stats(field, nw_lags)
    beta = work.beta.copy()
    for i, u in enumerate(field.design.units):
        T = len(u.y)
        okc = work.status[i] == ST_OK
        adj = work.bias[i, okc]
        good = np.all(np.isfinite(adj), axis=1)
        rows = np.where(okc)[0][good]
        beta[i, rows] -= work.bias[i, rows] / T
    return replace(work, beta=beta, debias_method="analytical")


def debias_jackknife(
    design: PanelDesign,
    grid: ThresholdGrid,
    link,
    opts: FitOptions = FitOptions(),
    nw_lags: Optional[int] = None,
    field: Optional[CoefficientField] = None,
) -> CoefficientField:
    """Half-panel jackknife: beta_hat = 2 beta_tilde - mean of half-sample fits.

    Odd usable windows drop the earliest period. Cells whose half-windows are
    not identified (or whose half fits fail) keep the uncorrected estimate and
    are logged. Per-cell sandwiches from the full-sample fit are attached for
    the downstream nonlinearity bias terms.
    """
    link = get_link(link)
    if field is None:
        field = fit_field(design, grid, link, opts)
    if field.sandwich is None:
        field = attach_cell_stats(field, nw_lags)
    beta = field.beta.copy()
    n_skipped = 0
    for i, u in enumerate(design.units):
        T = len(u.y)
        m = T // 2
        t0 = T - 2 * m  # odd window: drop the first usable period
        d = u.X.shape[1]
        cols = np.where(field.status[i] == ST_OK)[0]
        if cols.size == 0 or m < d + 1:
            n_skipped += cols.size
            continue
        halves = []
        okh = np.ones(cols.size, dtype=bool)
        for (h0, h1) in ((t0, t0 + m), (t0 + m, T)):
            yh = u.y[h0:h1]
            counts = np.searchsorted(np.sort(yh), field.grid.points[cols], side="right")
            identified = (counts > 0) & (counts < m)
            ucounts, inverse = np.unique(counts[identified], return_inverse=True)
            bh = np.full((cols.size, d), np.nan)
            if ucounts.size:
                Bh = np.zeros((len(ucounts), T), dtype=np.uint8)
                order = np.argsort(yh, kind="stable") + h0
                for k, c in enumerate(ucounts):
                    Bh[k, order[:c]] = 1
                bet, st, _, _ = fit_cells(
                    u.X, Bh, link.link_id, opts.max_iter, opts.tol, opts.sep_norm, True, h0, h1
                )
                good = st[inverse] == ST_OK
                rows = np.where(identified)[0][good]
                bh[rows] = bet[inverse][good]
            okh &= np.all(np.isfinite(bh), axis=1)
            halves.append(bh)
        corrected = 2.0 * field.beta[i, cols] - 0.5 * (halves[0] + halves[1])
        beta[i, cols[okh]] = corrected[okh]
        n_skipped += int(np.sum(~okh))
    if n_skipped:
        logger.warning(
            "jackknife: %d cell(s) kept uncorrected (half-window not identified)", n_skipped
        )
    return replace(field, beta=beta, debias_method="jackknife")
