"""Cross-sectional bootstrap: studentized sup-t uniform bands.

Whole units (their estimated coefficient paths, characteristics and
reference-period rows) are resampled with replacement; no first-stage refit
happens inside a draw. One index multiset is drawn per bootstrap draw and
shared across all thresholds and quantile levels, preserving the dependence
of the estimated process along the grid; units not identified at a given
threshold simply drop out of that threshold's moment sums, as in the
original estimator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dfield
from typing import Optional

import numpy as np

from .counterfactual import CharTransform, CovariateTransform, reference_rows
from .drfit import ST_ABOVE, CoefficientField
from .projection import ProjectionCurve, project_field
from .quantiles import rearranged_quantiles

logger = logging.getLogger(__name__)

IQR_NORMAL_WIDTH = 1.3489795003921634  # z_.75 - z_.25
SCALE_FLOOR = 1e-12


def rng_for_draw(seed: int, draw: int, retry: int = 0, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, draw, retry)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream, draw, retry))
    return np.random.Generator(np.random.Philox(ss))


def resample_units(n: int, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. uniform draws from {0, ..., n-1}."""
    if n < 1:
        raise ValueError("need at least one unit")
    return rng.integers(0, n, size=n)


def scale_estimate(draws: np.ndarray, method: str = "iqr"):
    """Bootstrap scale at one point: sample sd or normal-rescaled IQR.

    Returns (scale, degenerate); degenerate draws get the 1e-12 floor.
    """
    draws = np.asarray(draws, dtype=float)
    if draws.size < 20:
        raise ValueError("need at least 20 draws for a scale estimate")
    if method == "sd":
        s = float(np.std(draws, ddof=1))
    elif method == "iqr":
        q1, q3 = np.quantile(draws, [0.25, 0.75])
        s = float((q3 - q1) / IQR_NORMAL_WIDTH)
    else:
        raise ValueError(f"unknown scale method {method!r}")
    if s < SCALE_FLOOR:
        return SCALE_FLOOR, True
    return s, False


def _scales(centered: np.ndarray, method: str):
    """Column-wise scale of centered draws (B, M), NaN-aware.

    A quantized draw distribution can have zero interquartile range while
    some draws differ (grid-valued quantile effects at a flat density); the
    IQR scale then falls back to the sd so the studentized sup stays
    finite. Only an exactly-degenerate point gets the floor and flag.
    """
    sd = np.nanstd(centered, axis=0, ddof=1)
    if method == "sd":
        s = sd
    else:
        q1, q3 = np.nanquantile(centered, [0.25, 0.75], axis=0)
        s = (q3 - q1) / IQR_NORMAL_WIDTH
        s = np.where(s > SCALE_FLOOR, s, sd)
    degenerate = ~(s > SCALE_FLOOR)
    return np.where(degenerate, SCALE_FLOOR, s), degenerate


@dataclass
class BootstrapBand:
    """Symmetric studentized band: estimate +/- crit * scale per point."""

    target: str
    x: np.ndarray
    estimate: np.ndarray
    scale: np.ndarray
    crit: float
    level: float
    n_draws: int
    scale_method: str
    lo: np.ndarray
    hi: np.ndarray
    degenerate: np.ndarray
    dropped: np.ndarray
    flags: list = dfield(default_factory=list)
    draws: Optional[np.ndarray] = None

    def covers(self, truth: np.ndarray) -> bool:
        """Whether the band covers the curve at every retained point."""
        keep = ~self.dropped
        t = np.asarray(truth, dtype=float)
        return bool(np.all((self.lo[keep] <= t[keep]) & (t[keep] <= self.hi[keep])))


def _assemble_band(target, x, est, draws, level, scale_method, studentize=True,
                   drop_rate=0.0) -> BootstrapBand:
    B, M = draws.shape
    flags = []
    centered = draws - est[None, :]
    finite_frac = np.mean(np.isfinite(centered), axis=0)
    dropped = finite_frac < 1.0 - drop_rate if drop_rate > 0 else ~np.isfinite(est)
    dropped |= ~np.isfinite(est)
    if dropped.any():
        flags.append(f"{int(dropped.sum())} point(s) dropped from the sup")
        logger.warning("%s band: %d point(s) dropped from the sup", target, int(dropped.sum()))
    keep = ~dropped
    if not keep.any():
        raise ValueError("all points dropped; no band can be formed")
    scale, degenerate = _scales(centered[:, keep], scale_method)
    if degenerate.any():
        flags.append(f"{int(degenerate.sum())} degenerate point(s)")
        logger.warning("%s band: %d degenerate point(s)", target, int(degenerate.sum()))
    if B < 20:
        flags.append(f"low draw count B={B}")
        logger.warning("%s band: only %d bootstrap draws", target, B)
    if studentize:
        ratio = np.abs(centered[:, keep]) / scale[None, :]
    else:
        ratio = np.abs(centered[:, keep])
    with np.errstate(invalid="ignore"):
        sups = np.nanmax(ratio, axis=1)
    sups = sups[np.isfinite(sups)]
    if sups.size == 0:
        raise ValueError("no finite bootstrap sup draws")
    crit = float(np.quantile(sups, level, method="higher"))
    full_scale = np.full(M, np.nan)
    full_deg = np.zeros(M, dtype=bool)
    full_scale[keep] = scale
    full_deg[keep] = degenerate
    if studentize:
        lo, hi = est - crit * full_scale, est + crit * full_scale
    else:
        lo, hi = est - crit, est + crit
        full_scale = np.where(keep, 1.0, np.nan)
    return BootstrapBand(
        target=target, x=np.asarray(x, dtype=float), estimate=est, scale=full_scale,
        crit=crit, level=level, n_draws=B, scale_method=scale_method,
        lo=lo, hi=hi, degenerate=full_deg, dropped=dropped, flags=flags,
    )


def vec_curve(theta: np.ndarray) -> np.ndarray:
    """Column-major vec of theta (G, d, dz) -> (G, d*dz)."""
    G = theta.shape[0]
    return theta.transpose(0, 2, 1).reshape(G, -1)


def _batched_solve(a, b, strict):
    """solve over leading batch; strict raises on any singular member,
    otherwise singular members come back NaN."""
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        if strict:
            raise
    out = np.full(b.shape, np.nan)
    for g in range(a.shape[0]):
        try:
            out[g] = np.linalg.solve(a[g], b[g])
        except np.linalg.LinAlgError:
            pass
    return out


def _theta_star(beta_f, ok, z, w, idx, strict=True):
    """Per-threshold 2SLS on a resample.

    strict=True raises LinAlgError on a rank-deficient resample (caller
    redraws); strict=False leaves NaN at thresholds whose moment matrices
    are singular (structural on fine grids near the tails).
    """
    zr, wr = z[idx], w[idx]
    mr = ok[idx].astype(float)  # (n, G)
    br = np.nan_to_num(beta_f[idx])  # (n, G, d)
    c1 = np.einsum("ng,na,nb->gab", mr, wr, wr)
    c2 = np.einsum("ng,na,nb->gab", mr, wr, zr)
    s = _batched_solve(c1, c2, strict)  # (G, dw, dz)
    zhat = np.einsum("na,gab->ngb", wr, np.nan_to_num(s))
    m = np.einsum("ng,nga,ngb->gab", mr, zhat, zhat)
    num = np.einsum("ng,ngj,nga->gja", mr, br, zhat)
    theta_t = _batched_solve(m, num.transpose(0, 2, 1), strict)  # (G, dz, d)
    theta = theta_t.transpose(0, 2, 1)
    if not strict:
        bad = ~np.isfinite(s.reshape(s.shape[0], -1)).all(axis=1)
        theta[bad] = np.nan
    return theta


def _draw_with_retries(compute, seed, b, stream, n, max_retries=10):
    for retry in range(max_retries + 1):
        idx = resample_units(n, rng_for_draw(seed, b, retry, stream))
        try:
            return compute(idx)
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError(
        f"draw {b}: resample rank-deficient after {max_retries} retries"
    )


def theta_draws(field: CoefficientField, z: np.ndarray, w: np.ndarray,
                n_draws: int, seed: int, stream: int = 0,
                cols: Optional[np.ndarray] = None) -> np.ndarray:
    """Bootstrap draws of theta(y): (B, G', d, dz) over the selected columns."""
    N, G, d = field.beta.shape
    beta = field.beta if cols is None else field.beta[:, cols]
    ok = field.ok if cols is None else field.ok[:, cols]
    out = np.empty((n_draws, beta.shape[1], d, z.shape[1]))
    for b in range(n_draws):
        out[b] = _draw_with_retries(
            lambda idx: _theta_star(beta, ok, z, w, idx), seed, b, stream, N
        )
    return out


def band_projection(
    field: CoefficientField,
    z: np.ndarray,
    w: Optional[np.ndarray],
    eta: np.ndarray,
    n_draws: int = 500,
    level: float = 0.95,
    seed: int = 0,
    scale_method: str = "iqr",
    proj: Optional[ProjectionCurve] = None,
    studentize: bool = True,
) -> BootstrapBand:
    """Uniform band for eta'vec(theta(y)) over the field's grid.

    ``studentize=False`` gives the conservative constant-width variant
    (unstudentized sup with a worst-case critical value).
    """
    if proj is None:
        proj = project_field(field, z, w)
    z, w = proj.z, proj.w
    eta = np.asarray(eta, dtype=float)
    est = vec_curve(proj.theta) @ eta
    keep = np.isfinite(est)
    if not keep.any():
        raise ValueError("projection failed at every grid point")
    draws = theta_draws(field, z, w, n_draws, seed, cols=np.where(keep)[0])
    dk = vec_curve(draws.reshape(-1, *draws.shape[2:])).reshape(n_draws, -1, len(eta)) @ eta
    dvals = np.full((n_draws, len(est)), np.nan)
    dvals[:, keep] = dk
    return _assemble_band("projection", proj.grid_points, est, dvals, level,
                          scale_method, studentize=studentize)


def band_conservative(field, z, w, eta, n_draws=500, level=0.95, seed=0,
                      proj=None) -> BootstrapBand:
    """Constant-width band from the unstudentized sup deviation."""
    return band_projection(field, z, w, eta, n_draws, level, seed,
                           scale_method="iqr", proj=proj, studentize=False)


class _DistributionPrep:
    """Precomputed per-unit pieces for bootstrap CDF draws at one period."""

    def __init__(self, field: CoefficientField, transform: CovariateTransform,
                 gt: CharTransform, proj: Optional[ProjectionCurve], period,
                 bias_correct: bool = True):
        self.field = field
        self.link = field.link
        rows, have = reference_rows(field, period)
        rows[have] = transform.apply(rows[have])
        self.hx = np.nan_to_num(rows)
        self.have = have
        self.ok = field.ok & have[:, None]
        self.above = (field.status == ST_ABOVE) & have[:, None]
        self.beta = field.beta
        self.a = np.einsum("nj,ngj->ng", self.hx, np.nan_to_num(field.beta))
        self.tvec = np.array([len(u.y) for u in field.design.units], dtype=float)
        self.bias_correct = bias_correct
        if bias_correct:
            if field.sandwich is None:
                raise ValueError("bias correction needs per-cell variances")
            self.q = np.einsum("nj,ngjk,nk->ng", self.hx,
                               np.nan_to_num(field.sandwich), self.hx)
            self.good_sand = np.isfinite(
                field.sandwich.reshape(*field.status.shape, -1)
            ).all(axis=2)
        else:
            self.q = None
            self.good_sand = None
        if proj is not None:
            delta = gt.apply(proj.z) - proj.z
            self.delta = delta if np.any(delta) else None
            self.z, self.w = proj.z, proj.w
        else:
            self.delta = None
            self.z = self.w = None
        # static contributions reused when no coefficient shift is needed
        self.static_contrib = self._contrib(self.a)
        if self.delta is not None:
            shift0 = np.einsum("nj,gjb,nb->ng", self.hx, np.nan_to_num(proj.theta), self.delta)
            theta_bad = ~np.isfinite(proj.theta.reshape(len(proj.grid_points), -1)).all(axis=1)
            a_est = self.a + shift0
            a_est[:, theta_bad] = np.nan
            self.est_contrib = self._contrib(a_est)
        else:
            self.est_contrib = self.static_contrib

    def _contrib(self, a_idx):
        lam = self.link.eval(0, -a_idx)
        c = np.where(self.ok, lam, 0.0)
        if self.bias_correct:
            piece = 0.5 * self.link.eval(2, -a_idx) * self.q / self.tvec[:, None]
            c = c - np.where(self.ok & self.good_sand, piece, 0.0)
        return np.where(self.above, 1.0, c)

    def estimate(self) -> np.ndarray:
        n = int(self.have.sum())
        return self.est_contrib[self.have].sum(axis=0) / n

    def draw(self, idx) -> np.ndarray:
        have_r = self.have[idx]
        n = int(have_r.sum())
        if n == 0:
            raise np.linalg.LinAlgError("resample has no usable reference rows")
        if self.delta is None:
            return self.static_contrib[idx][have_r].sum(axis=0) / n
        theta_s = _theta_star(self.beta, self.field.ok, self.z, self.w, idx, strict=False)
        shift = np.einsum("nj,gjb,nb->ng", self.hx[idx], theta_s, self.delta[idx])
        a_star = self.a[idx] + shift
        contrib = self._contrib_resampled(a_star, idx)
        return contrib[have_r].sum(axis=0) / n

    def _contrib_resampled(self, a_idx, idx):
        ok_r, above_r = self.ok[idx], self.above[idx]
        lam = self.link.eval(0, -a_idx)
        c = np.where(ok_r, lam, 0.0)
        if self.bias_correct:
            piece = 0.5 * self.link.eval(2, -a_idx) * self.q[idx] / self.tvec[idx, None]
            c = c - np.where(ok_r & self.good_sand[idx], piece, 0.0)
        return np.where(above_r, 1.0, c)


def band_distribution(
    field: CoefficientField,
    transform: CovariateTransform = CovariateTransform(),
    gt: CharTransform = CharTransform(),
    proj: Optional[ProjectionCurve] = None,
    period=None,
    n_draws: int = 500,
    level: float = 0.95,
    seed: int = 0,
    scale_method: str = "iqr",
    bias_correct: bool = True,
) -> BootstrapBand:
    """Uniform band for the (counterfactual) CDF at a reference period.

    Resamples whole (x_it, beta_i(.), w_i, z_i) tuples; theta(y) and the
    shifted coefficients are recomputed inside each draw.
    """
    if gt.kind != "identity" and proj is None:
        raise ValueError("a characteristic transform needs the projection curve")
    prep = _DistributionPrep(field, transform, gt, proj, period, bias_correct)
    est = prep.estimate()
    N = field.n_units
    draws = np.empty((n_draws, len(est)))
    for b in range(n_draws):
        draws[b] = _draw_with_retries(prep.draw, seed, b, 1, N)
    return _assemble_band("distribution", field.grid.points, est, draws, level, scale_method)


def band_qe(
    field: CoefficientField,
    transform: CovariateTransform,
    gt: CharTransform,
    proj: Optional[ProjectionCurve],
    period,
    levels,
    n_draws: int = 500,
    level: float = 0.95,
    seed: int = 0,
    scale_method: str = "iqr",
    bias_correct: bool = True,
    sentinel_tol: float = 0.01,
) -> BootstrapBand:
    """Uniform band for QE(tau) over the requested quantile levels.

    Each draw uses one index multiset for both the actual and counterfactual
    CDFs. Levels with sentinel (off-grid) quantiles in more than
    ``sentinel_tol`` of the draws are dropped from the sup and logged.
    """
    levels = np.asarray(levels, dtype=float)
    prep_f = _DistributionPrep(field, CovariateTransform(), CharTransform(), None,
                               period, bias_correct)
    prep_g = _DistributionPrep(field, transform, gt, proj, period, bias_correct)
    grid = field.grid.points
    qf = rearranged_quantiles(grid, prep_f.estimate(), levels)[0]
    qg = rearranged_quantiles(grid, prep_g.estimate(), levels)[0]
    est = qg - qf
    est = np.where(np.isfinite(est), est, np.nan)
    N = field.n_units
    draws = np.empty((n_draws, len(levels)))
    for b in range(n_draws):
        def compute(idx):
            fstar = prep_f.draw(idx)
            gstar = prep_g.draw(idx)
            both = rearranged_quantiles(grid, np.vstack([fstar, gstar]), levels)
            return both[1] - both[0]
        qe = _draw_with_retries(compute, seed, b, 2, N)
        draws[b] = np.where(np.isfinite(qe), qe, np.nan)
    band = _assemble_band("quantile-effect", levels, est, draws, level, scale_method,
                          drop_rate=sentinel_tol)
    band.draws = draws
    return band
