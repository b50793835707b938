"""First-stage per-unit, per-threshold distribution regression.

Each (unit, threshold) cell maximizes the binary log-likelihood with
success indicator 1{y_it <= y} and success probability Lambda(-x_it'beta).
The fitted coefficient path y -> beta_i(y) is a right-continuous step
function: the indicators only change when y crosses one of the unit's
observed outcomes, so cells sharing an indicator pattern share one fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ._backend import fit_cells
from .links import LinkFunction, get_link
from .panel import (
    IdentificationStatus,
    PanelDesign,
    PanelError,
    ThresholdGrid,
    UnitDesign,
    classify_identification,
)

logger = logging.getLogger(__name__)

ST_OK = 0
ST_SEPARATED = 1
ST_MAXITER = 2
ST_NUMERICAL = 3
ST_BELOW = 4
ST_ABOVE = 5
ST_SHORT = 6

STATUS_NAMES = {
    ST_OK: "Converged",
    ST_SEPARATED: "Separated",
    ST_MAXITER: "MaxIterExceeded",
    ST_NUMERICAL: "NumericalFailure",
    ST_BELOW: "BelowRange",
    ST_ABOVE: "AboveRange",
    ST_SHORT: "TooShort",
}


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 100
    tol: float = 1e-8
    sep_norm: float = 50.0


@dataclass
class DrFit:
    """A single-cell fit with its score series and average Hessian.

    ``hessian`` stores the per-period average of the negative log-likelihood
    curvature, i.e. -(1/T) sum_t d2 l_t; positive definite at an interior
    maximum. ``score_series`` rows are the per-period gradients psi_it(y).
    """

    beta: np.ndarray
    status: int
    loglik: float
    score_series: Optional[np.ndarray] = None  # (T, d)
    hessian: Optional[np.ndarray] = None  # (d, d)
    X: Optional[np.ndarray] = None  # cell design (reference, not copied)
    b: Optional[np.ndarray] = None  # cell indicators 1{y_it <= y}

    @property
    def converged(self) -> bool:
        return self.status == ST_OK

    @property
    def status_name(self) -> str:
        return STATUS_NAMES[self.status]


def indicator_matrix(y: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Rows of 1{y_t <= y} for thresholds given by their indicator counts.

    ``counts[k]`` is the number of observations at or below the k-th
    threshold; ties are grouped, so every admissible count sits on a tie
    boundary of the sorted outcomes.
    """
    T = len(y)
    order = np.argsort(y, kind="stable")
    B = np.zeros((len(counts), T), dtype=np.uint8)
    for k, c in enumerate(counts):
        B[k, order[:c]] = 1
    return B


def score_weights(link: LinkFunction, s, b):
    """First three derivatives of the per-period log-likelihood in the index.

    Returns (u, a2, a3) with u = dl/ds, a2 = d2l/ds2, a3 = d3l/ds3 evaluated
    at index s with indicator b; the chain rule with ds/dbeta = -x gives the
    coefficient-space derivatives.
    """
    from .links import clip_prob

    lam = clip_prob(link.eval(0, s))
    d1 = link.eval(1, s)
    d2 = link.eval(2, s)
    d3 = link.eval(3, s)
    q = 1.0 - lam
    r1, r0 = d1 / lam, d1 / q
    A1, B1 = r1, -r0
    A2 = d2 / lam - r1 * r1
    B2 = -d2 / q - r0 * r0
    A3 = d3 / lam - 3.0 * d2 * d1 / lam**2 + 2.0 * r1**3
    B3 = -d3 / q - 3.0 * d2 * d1 / q**2 - 2.0 * r0**3
    b = np.asarray(b, dtype=bool)
    u = np.where(b, A1, B1)
    a2 = np.where(b, A2, B2)
    a3 = np.where(b, A3, B3)
    return u, a2, a3


def cell_scores(X: np.ndarray, b: np.ndarray, beta: np.ndarray, link: LinkFunction):
    """Score series psi_t (T, d) and average negative Hessian (d, d)."""
    s = -X @ beta
    u, a2, _ = score_weights(link, s, b)
    psi = -u[:, None] * X
    hess = -(X * a2[:, None]).T @ X / len(b)
    return psi, hess


def fit_unit_threshold(
    unit: UnitDesign,
    y: float,
    link,
    opts: FitOptions = FitOptions(),
) -> DrFit:
    """Fit one (unit, threshold) cell; the unit must be identified at y."""
    link = get_link(link)
    lo, hi = unit.y.min(), unit.y.max()
    if not (lo <= y < hi):
        raise PanelError(
            f"unit {unit.unit_id} not identified at y={y}: range [{lo}, {hi})"
        )
    if len(unit.y) < unit.X.shape[1] + 1:
        raise PanelError(f"unit {unit.unit_id}: too few usable periods for the design")
    b = (unit.y <= y).astype(np.uint8)
    betas, status, lls, _ = fit_cells(
        unit.X, b[None, :], link.link_id, opts.max_iter, opts.tol, opts.sep_norm, False
    )
    psi, hess = cell_scores(unit.X, b.astype(bool), betas[0], link)
    return DrFit(
        beta=betas[0],
        status=int(status[0]),
        loglik=float(lls[0]),
        score_series=psi,
        hessian=hess,
        X=unit.X,
        b=b.astype(bool),
    )


@dataclass
class CoefficientField:
    """Per-unit, per-grid-threshold coefficients with cell statuses.

    The accessor is a right-continuous step function over the grid; arrays
    filled by the debiasing / variance steps are attached after fitting.
    """

    design: PanelDesign
    grid: ThresholdGrid
    link: LinkFunction
    beta: np.ndarray  # (N, G, d); NaN where no fit
    status: np.ndarray  # (N, G) int8
    loglik: np.ndarray  # (N, G)
    ident: IdentificationStatus
    opts: FitOptions = field(default_factory=FitOptions)
    debias_method: str = "none"
    nw_lags: Optional[int] = None
    sandwich: Optional[np.ndarray] = None  # (N, G, d, d), var of sqrt(T)(beta_tilde - beta)
    bias: Optional[np.ndarray] = None  # (N, G, d)

    @property
    def n_units(self) -> int:
        return self.beta.shape[0]

    @property
    def d_x(self) -> int:
        return self.beta.shape[2]

    @property
    def ok(self) -> np.ndarray:
        """Cells with a converged fit; all others are skipped downstream."""
        return self.status == ST_OK

    def grid_index(self, y: float) -> int:
        """Index of the step segment containing y; -1 when y is below the grid."""
        return int(np.searchsorted(self.grid.points, y, side="right")) - 1

    def beta_at(self, i: int, y: float) -> Optional[np.ndarray]:
        g = self.grid_index(y)
        if g < 0 or self.status[i, g] != ST_OK:
            return None
        return self.beta[i, g]

    def with_beta(self, beta: np.ndarray, **changes) -> "CoefficientField":
        return replace(self, beta=beta, **changes)


def fit_field(
    design: PanelDesign,
    grid: ThresholdGrid,
    link,
    opts: FitOptions = FitOptions(),
) -> CoefficientField:
    """Fit every identified (unit, threshold) cell over the grid.

    Cell failures are recorded per cell and never fatal. Within a unit,
    thresholds that induce the same indicator pattern share a single fit,
    and consecutive patterns warm-start the Newton solver.
    """
    link = get_link(link)
    ident = classify_identification(design, grid)
    N, G, d = design.n_units, len(grid), design.d_x
    beta = np.full((N, G, d), np.nan)
    status = np.zeros((N, G), dtype=np.int8)
    loglik = np.full((N, G), np.nan)

    n_failed = 0
    for i, u in enumerate(design.units):
        T = len(u.y)
        if T < d + 1:
            logger.warning("unit %s: only %d usable periods; cells flagged", u.unit_id, T)
            status[i, :] = ST_SHORT
            continue
        counts = np.searchsorted(np.sort(u.y), grid.points, side="right")
        status[i, counts == 0] = ST_BELOW
        status[i, counts == T] = ST_ABOVE
        inner = (counts > 0) & (counts < T)
        if not inner.any():
            continue
        ucounts, inverse = np.unique(counts[inner], return_inverse=True)
        B = indicator_matrix(u.y, ucounts)
        bet, st, lls, _ = fit_cells(
            u.X, B, link.link_id, opts.max_iter, opts.tol, opts.sep_norm, True
        )
        cols = np.where(inner)[0]
        beta[i, cols] = bet[inverse]
        status[i, cols] = st[inverse].astype(np.int8)
        loglik[i, cols] = lls[inverse]
        n_failed += int(np.sum(st != ST_OK))
    if n_failed:
        logger.warning("%d cell fit(s) did not converge (flagged, not fatal)", n_failed)
    return CoefficientField(
        design=design,
        grid=grid,
        link=link,
        beta=beta,
        status=status,
        loglik=loglik,
        ident=ident,
        opts=opts,
    )


def fit_unit_states_field(
    unit: UnitDesign,
    link,
    opts: FitOptions = FitOptions(),
):
    """Fits at the unit's own distinct outcome values (all but the largest).

    Returns (states, betas, statuses): the step-function representation used
    by the Markov-chain construction, where states are the sorted distinct
    outcomes and betas[j] applies on [states[j], states[j+1]).
    """
    link = get_link(link)
    states, counts = np.unique(unit.y, return_counts=True)
    cum = np.cumsum(counts)
    fit_counts = cum[:-1]  # the top state is out of the identified window
    if len(states) < 2:
        raise PanelError(f"unit {unit.unit_id}: fewer than 2 distinct outcome values")
    B = indicator_matrix(unit.y, fit_counts)
    betas, st, _, _ = fit_cells(
        unit.X, B, link.link_id, opts.max_iter, opts.tol, opts.sep_norm, True
    )
    return states, betas, st
