"""Actual and counterfactual cross-sectional distribution estimators.

Counterfactuals act through two channels: a transform h of the reference
period regressor rows (tax experiments on the lagged outcome) and a
transform g of the time-invariant characteristics that shifts coefficients
through the projection, beta_i^g(y) = beta_i(y) + theta(y)[g(z_i) - z_i].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .drfit import ST_ABOVE, CoefficientField
from .links import LinkFunction
from .panel import ThresholdGrid
from .projection import ProjectionCurve

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CovariateTransform:
    """Transform h applied to reference-period design rows x_it.

    Kinds: identity; flat_tax (lag shifted by log(1-kappa)); progressive_tax
    (lag shifted by log(1 - rank/2), rank from the reference cross-section);
    custom (tabulated per-unit replacement rows).
    """

    kind: str = "identity"
    kappa: float = 0.0
    custom_rows: Optional[np.ndarray] = None

    def apply(self, rows: np.ndarray) -> np.ndarray:
        if self.kind == "identity":
            return rows
        if self.kind == "flat_tax":
            return apply_flat_tax(rows, self.kappa)
        if self.kind == "progressive_tax":
            return apply_progressive_tax(rows)
        if self.kind == "custom":
            if self.custom_rows is None or self.custom_rows.shape != rows.shape:
                raise ValueError("custom transform needs replacement rows matching the design")
            return self.custom_rows
        raise ValueError(f"unknown covariate transform {self.kind!r}")


@dataclass(frozen=True)
class CharTransform:
    """Transform g applied to time-invariant characteristics z_i."""

    kind: str = "identity"
    column: int = 0
    value: float = 0.0
    custom_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def apply(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        if self.kind == "identity":
            return z
        out = z.copy()
        if self.kind == "min_value":
            out[:, self.column] = np.maximum(out[:, self.column], self.value)
        elif self.kind == "add_value":
            out[:, self.column] = out[:, self.column] + self.value
        elif self.kind == "custom":
            if self.custom_fn is None:
                raise ValueError("custom characteristic transform needs a callable")
            out = np.asarray(self.custom_fn(z), dtype=float)
            if out.shape != z.shape:
                raise ValueError("characteristic transform must preserve dimensions")
        else:
            raise ValueError(f"unknown characteristic transform {self.kind!r}")
        return out


def _check_lag_layout(rows: np.ndarray) -> None:
    if rows.ndim != 2 or rows.shape[1] != 2 or not np.allclose(rows[:, 0], 1.0):
        raise ValueError("tax transforms require the (1, y_lag) design layout")


def apply_flat_tax(rows: np.ndarray, kappa: float) -> np.ndarray:
    """Shift the lagged (log-scale) outcome by log(1 - kappa)."""
    _check_lag_layout(rows)
    if not 0.0 <= kappa < 1.0:
        raise ValueError(f"flat tax rate must lie in [0, 1), got {kappa}")
    out = rows.copy()
    out[:, 1] += np.log1p(-kappa)
    return out


def apply_progressive_tax(rows: np.ndarray) -> np.ndarray:
    """Shift each lag by log(1 - rank/2), rank = ECDF of the cross-section.

    Rank of unit i is #{j: y_j <= y_i} / N over the same reference period;
    ties share ranks, the top earner gets rank one (tax rate one half).
    """
    _check_lag_layout(rows)
    lag = rows[:, 1]
    n = len(lag)
    order = np.sort(lag)
    rank = np.searchsorted(order, lag, side="right") / n
    out = rows.copy()
    out[:, 1] += np.log1p(-0.5 * rank)
    return out


def counterfactual_coefficients(
    field: CoefficientField, proj: ProjectionCurve, gt: CharTransform
) -> CoefficientField:
    """Shift coefficients by theta(y)[g(z_i) - z_i] at every converged cell."""
    z = proj.z
    delta = gt.apply(z) - z  # (N, dz)
    if not np.any(delta):
        return field
    beta = field.beta.copy()
    status = field.status.copy()
    shift = np.einsum("gjb,nb->ngj", np.nan_to_num(proj.theta), delta)
    theta_ok = np.all(np.isfinite(proj.theta.reshape(len(proj.grid_points), -1)), axis=1)
    ok = field.ok & theta_ok[None, :]
    beta[ok] += shift[ok]
    # a converged cell without a usable theta(y) cannot be shifted: flag it
    from .drfit import ST_NUMERICAL

    broken = field.ok & ~theta_ok[None, :]
    if broken.any():
        logger.warning("%d cell(s) lack theta(y); counterfactual flagged there", int(broken.sum()))
        status[broken] = ST_NUMERICAL
        beta[broken] = np.nan
    return field.with_beta(beta, status=status)


@dataclass
class DistributionEstimate:
    """A CDF-valued estimate on a threshold grid."""

    grid: ThresholdGrid
    values: np.ndarray
    n_units: int
    tail_share: np.ndarray  # contribution of above-range units per point
    bias_applied: bool
    label: str = "F"

    def __post_init__(self):
        if np.any(self.values < -0.1 - 1e-9) or np.any(self.values > 1.1 + 1e-9):
            raise ValueError("distribution values escaped the sanity range [-0.1, 1.1]")


def reference_rows(field: CoefficientField, period) -> tuple[np.ndarray, np.ndarray]:
    """Design rows x_it at a calendar period.

    Units missing the period, or too short to carry any fit, are excluded
    from the cross-sectional average with a warning.
    """
    from .drfit import ST_SHORT

    N, d = field.n_units, field.d_x
    rows = np.full((N, d), np.nan)
    have = np.zeros(N, dtype=bool)
    for i, u in enumerate(field.design.units):
        hit = np.where(u.times == period)[0]
        if hit.size:
            rows[i] = u.X[hit[0]]
            have[i] = True
    short = np.all(field.status == ST_SHORT, axis=1)
    have &= ~short
    if not have.all():
        logger.warning("period %s: %d unit(s) excluded (missing row or too short)",
                       period, int((~have).sum()))
    return rows, have


def distribution_pieces(
    field: CoefficientField,
    rows: np.ndarray,
    have: np.ndarray,
    bias_correct: bool = True,
):
    """Per-unit, per-threshold contributions to the plug-in CDF estimator.

    Returns (contrib, ok, above): contrib[i, g] is Lambda(-x_i'beta_i(y_g))
    minus its nonlinearity bias piece for converged cells, 1 for above-range
    cells, 0 for below-range cells and for failures (logged by the caller).
    """
    link: LinkFunction = field.link
    N, G, _ = field.beta.shape
    ok = field.ok & have[:, None]
    above = (field.status == ST_ABOVE) & have[:, None]
    idx = -np.einsum("nj,ngj->ng", np.nan_to_num(rows), np.nan_to_num(field.beta))
    lam = link.eval(0, idx)
    contrib = np.where(ok, lam, 0.0)
    if bias_correct:
        if field.sandwich is None:
            raise ValueError("bias correction needs per-cell variances (attach_cell_stats)")
        quad = np.einsum("nj,ngjk,nk->ng", np.nan_to_num(rows), np.nan_to_num(field.sandwich), np.nan_to_num(rows))
        good_sand = np.isfinite(field.sandwich.reshape(N, G, -1)).all(axis=2)
        n_bad = int(np.sum(ok & ~good_sand))
        if n_bad:
            logger.warning("%d cell(s) lack a valid sandwich; bias piece dropped", n_bad)
        tvec = np.array([len(u.y) for u in field.design.units], dtype=float)
        piece = 0.5 * link.eval(2, idx) * quad / tvec[:, None]
        contrib = contrib - np.where(ok & good_sand, piece, 0.0)
    contrib = np.where(above, 1.0, contrib)
    return contrib, ok, above


def estimate_distribution(
    field: CoefficientField,
    transform: CovariateTransform = CovariateTransform(),
    period=None,
    bias_correct: bool = True,
    label: str = "F",
) -> DistributionEstimate:
    """Plug-in estimator of the cross-sectional CDF at a reference period.

    Above-range units contribute probability one, below-range units zero;
    converged cells contribute Lambda(-h(x_it)'beta_i(y)) less the
    second-order nonlinearity bias (1/2T) tr(Ldd x x' Sigma_i(y)).
    """
    rows, have = reference_rows(field, period)
    rows[have] = transform.apply(rows[have])
    contrib, ok, above = distribution_pieces(field, rows, have, bias_correct)
    n_eval = int(have.sum())
    if n_eval == 0:
        raise ValueError(f"no unit has a design row at period {period}")
    n_failed = int(np.sum(have[:, None] & ~ok & ~above & (field.ident.labels == 0)))
    if n_failed:
        logger.warning("%d identified cell(s) without a fit excluded from the CDF", n_failed)
    values = contrib[have].sum(axis=0) / n_eval
    return DistributionEstimate(
        grid=field.grid,
        values=values,
        n_units=n_eval,
        tail_share=above[have].sum(axis=0) / n_eval,
        bias_applied=bias_correct,
        label=label,
    )
