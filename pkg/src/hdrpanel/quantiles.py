"""Quantile operators on tabulated CDFs: left inverse, monotone
rearrangement, and quantile-effect curves.

Quantiles are grid-valued (no interpolation): the estimated CDFs are only
identified at the threshold grid. Levels whose crossing falls beyond the
grid return +inf sentinels and are excluded from downstream bands.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .counterfactual import DistributionEstimate

logger = logging.getLogger(__name__)


def left_inverse(grid: np.ndarray, values: np.ndarray, tau: float) -> float:
    """Smallest grid point with F >= tau; +inf when the curve never reaches tau."""
    values = np.asarray(values, dtype=float)
    if np.any(np.diff(values) < 0):
        raise ValueError("left_inverse needs a monotone CDF; rearrange first")
    k = int(np.searchsorted(values, tau, side="left"))
    if k >= len(values):
        return float("inf")
    return float(grid[k])


def rearrange(values: np.ndarray) -> np.ndarray:
    """Monotone rearrangement over the grid: clip to [0, 1] and sort."""
    return np.sort(np.clip(values, 0.0, 1.0))


def rearranged_inverse(grid: np.ndarray, values: np.ndarray, tau: float) -> float:
    """Generalized (rearrangement) inverse of a possibly non-monotone table."""
    return left_inverse(grid, rearrange(values), tau)


def rearranged_quantiles(grid: np.ndarray, values: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """Vectorized rearranged inverse; values may be (G,) or (B, G) draws."""
    values = np.atleast_2d(values)
    srt = np.sort(np.clip(values, 0.0, 1.0), axis=1)
    idx = np.apply_along_axis(np.searchsorted, 1, srt, np.asarray(taus), side="left")
    out = np.where(idx < srt.shape[1], grid[np.minimum(idx, srt.shape[1] - 1)], np.inf)
    return out


@dataclass
class QuantileEffectCurve:
    levels: np.ndarray
    values: np.ndarray  # QE(tau); NaN where a sentinel quantile appeared
    q_actual: np.ndarray
    q_counterfactual: np.ndarray
    provenance: str = "one-period"

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.values)


def quantile_effect(
    fhat: DistributionEstimate,
    ghat: DistributionEstimate,
    levels,
    provenance: str = "one-period",
) -> QuantileEffectCurve:
    """QE(tau) = rearranged inverse of G minus rearranged inverse of F."""
    if len(fhat.grid) != len(ghat.grid) or np.any(fhat.grid.points != ghat.grid.points):
        raise ValueError("actual and counterfactual estimates must share a grid")
    levels = np.asarray(levels, dtype=float)
    grid = fhat.grid.points
    qf = rearranged_quantiles(grid, fhat.values, levels)[0]
    qg = rearranged_quantiles(grid, ghat.values, levels)[0]
    with np.errstate(invalid="ignore"):
        vals = qg - qf
    bad = ~np.isfinite(vals)
    if bad.any():
        logger.warning("levels %s fall outside the grid; flagged", levels[bad])
        vals = np.where(bad, np.nan, vals)
    return QuantileEffectCurve(
        levels=levels, values=vals, q_actual=qf, q_counterfactual=qg, provenance=provenance
    )
