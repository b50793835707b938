"""Second-stage projection of unit coefficients on characteristics.

2SLS of beta_i(y) on z_i with instruments w_i (OLS when w = z), run
separately at each grid threshold over the units identified there, plus the
plug-in variance components used by the analytical inference comparisons.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .drfit import CoefficientField

logger = logging.getLogger(__name__)

RANK_RTOL = 1e-10


class RankError(np.linalg.LinAlgError):
    pass


@dataclass
class ProjectionEstimate:
    """theta(y) and residuals at a single threshold.

    ``theta`` is d_x x dim(z); gamma rows are NaN for units outside the
    identified set at this threshold.
    """

    y: float
    theta: np.ndarray
    gamma: np.ndarray  # (N, d_x)
    zhat: np.ndarray  # (N, dim z), NaN outside the included set
    included: np.ndarray  # (N,) bool


@dataclass
class ProjectionCurve:
    grid_points: np.ndarray
    theta: np.ndarray  # (G, d_x, dz)
    gamma: np.ndarray  # (N, G, d_x)
    included: np.ndarray  # (N, G) bool
    z: np.ndarray
    w: np.ndarray

    def theta_at(self, y: float) -> Optional[np.ndarray]:
        g = int(np.searchsorted(self.grid_points, y, side="right")) - 1
        if g < 0 or not np.all(np.isfinite(self.theta[g])):
            return None
        return self.theta[g]


def instrument_projection(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """First-stage fitted values zhat_i' = w_i' (sum ww')^{-1} (sum wz')."""
    wtw = w.T @ w
    coef = np.linalg.pinv(wtw, rcond=RANK_RTOL) @ (w.T @ z)
    return w @ coef


def two_stage_ls(beta: np.ndarray, z: np.ndarray, w: np.ndarray):
    """Return (theta, zhat) for beta (n, d) on z (n, dz) with instruments w.

    Exactly-collinear instrument columns are absorbed by the pseudo-inverse;
    a rank-deficient zhat cross-product means theta is unidentified and
    raises RankError.
    """
    n, dz = z.shape
    if w.shape[1] < dz:
        raise RankError(f"dim(w)={w.shape[1]} < dim(z)={dz}")
    zhat = instrument_projection(z, w) if not np.array_equal(w, z) else z
    ztz = zhat.T @ zhat
    sv = np.linalg.svd(ztz, compute_uv=False)
    if sv[0] <= 0 or sv[-1] < RANK_RTOL * sv[0]:
        raise RankError("instrumented moment matrix is rank deficient")
    theta = np.linalg.solve(ztz, zhat.T @ beta).T  # (d, dz)
    return theta, zhat


def _as_col(a: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if a is None:
        return None
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def project(field: CoefficientField, z: np.ndarray, w: Optional[np.ndarray], y: float) -> ProjectionEstimate:
    """2SLS projection at a single threshold y (nearest grid segment)."""
    g = field.grid_index(y)
    if g < 0:
        raise ValueError(f"y={y} is below the fitted grid")
    return _project_at_index(field, _as_col(z), _as_col(w), g, float(field.grid.points[g]))


def _project_at_index(field, z, w, g, ypoint) -> ProjectionEstimate:
    w = z if w is None else w
    N = field.n_units
    inc = field.ok[:, g]
    gamma = np.full((N, field.d_x), np.nan)
    zhat_full = np.full((N, z.shape[1]), np.nan)
    beta = field.beta[inc, g]
    theta, zhat = two_stage_ls(beta, z[inc], w[inc])
    gamma[inc] = beta - z[inc] @ theta.T
    zhat_full[inc] = zhat
    return ProjectionEstimate(y=ypoint, theta=theta, gamma=gamma, zhat=zhat_full, included=inc)


def project_field(field: CoefficientField, z: np.ndarray, w: Optional[np.ndarray] = None) -> ProjectionCurve:
    """theta(y) at every grid threshold; thresholds with too few identified
    units (or a rank-deficient moment matrix) come back NaN with a warning."""
    z = _as_col(z)
    w_eff = z if w is None else _as_col(w)
    N, G, d = field.beta.shape
    dz = z.shape[1]
    theta = np.full((G, d, dz), np.nan)
    gamma = np.full((N, G, d), np.nan)
    included = field.ok.copy()
    for g in range(G):
        inc = included[:, g]
        if inc.sum() < max(dz, w_eff.shape[1]):
            logger.warning("threshold %g: %d identified units, projection skipped",
                           field.grid.points[g], int(inc.sum()))
            included[:, g] = False
            continue
        try:
            est = _project_at_index(field, z, w_eff, g, float(field.grid.points[g]))
        except RankError as exc:
            logger.warning("threshold %g: %s", field.grid.points[g], exc)
            included[:, g] = False
            continue
        theta[g] = est.theta
        gamma[:, g] = est.gamma
    return ProjectionCurve(grid_points=field.grid.points.copy(), theta=theta,
                           gamma=gamma, included=included, z=z, w=w_eff)


@dataclass
class PluginVariances:
    """V_psi and V_gamma components of the analytical variance of vec(theta).

    ``sigma_over``/``sigma_under`` build the combined matrices used by the
    plug-in-over (keeps both terms) and plug-in-under (drops the gamma term)
    confidence bands; vec stacks theta column-major.
    """

    v_psi: np.ndarray
    v_gamma: np.ndarray
    n_included: int
    t_mean: float

    def sigma_over(self) -> np.ndarray:
        return self.v_psi / (self.n_included * self.t_mean) + self.v_gamma / self.n_included

    def sigma_under(self) -> np.ndarray:
        return self.v_psi / (self.n_included * self.t_mean)


def s_wz_matrix(z: np.ndarray, w: np.ndarray) -> np.ndarray:
    """S_wz = C1^{-1} C2 (C2' C1^{-1} C2)^{-1} from sample moments."""
    n = len(z)
    c1 = w.T @ w / n
    c2 = w.T @ z / n
    c1i_c2 = np.linalg.solve(c1, c2)
    return c1i_c2 @ np.linalg.inv(c2.T @ c1i_c2)


def plugin_variances(field: CoefficientField, proj: ProjectionCurve, y: float) -> PluginVariances:
    """Plug-in variance components at threshold y.

    Requires per-cell sandwiches on the field (attach_cell_stats). Units in
    the identified set without a finite sandwich are dropped from the psi
    component with a warning.
    """
    if field.sandwich is None:
        raise ValueError("field has no per-cell variances; run attach_cell_stats first")
    g = field.grid_index(y)
    inc = proj.included[:, g]
    n = int(inc.sum())
    z, w = proj.z[inc], proj.w[inc]
    gamma = proj.gamma[inc, g]  # (n, d)
    sand = field.sandwich[inc, g]  # (n, d, d)
    swz = s_wz_matrix(z, w)
    sw = w @ swz  # (n, dz)
    ok_s = np.all(np.isfinite(sand.reshape(n, -1)), axis=1)
    if not ok_s.all():
        logger.warning("threshold %g: %d unit(s) lack a sandwich, dropped from V_psi",
                       proj.grid_points[g], int((~ok_s).sum()))
    v_psi = np.einsum("na,nb,njk->ajbk", sw[ok_s], sw[ok_s], sand[ok_s]) / max(ok_s.sum(), 1)
    v_gamma = np.einsum("na,nb,nj,nk->ajbk", sw, sw, gamma, gamma) / n
    dz, d = sw.shape[1], gamma.shape[1]
    t_mean = float(np.mean([len(u.y) for u in field.design.units]))
    return PluginVariances(
        v_psi=v_psi.reshape(dz * d, dz * d),
        v_gamma=v_gamma.reshape(dz * d, dz * d),
        n_included=n,
        t_mean=t_mean,
    )
