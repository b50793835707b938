"""Monte-Carlo harness: the toy variance comparison, the dynamic-DR
coverage table across five inference methods, and the QTE MSE/coverage
table, all reproducible from a single root seed.

The dynamic design draws w_i ~ U(1.5, 2.5), gbar_i ~ U(-0.5, 0.5),
y_0 ~ U(0.52, 1.52) and iterates y_t = theta^{-1}(e_t / (y_{t-1}(w+gbar)))
with theta(y) = 3 sgn(y-2)(y-2)^2, so Pr(y_t <= y | past) = Phi(y_{t-1}
beta_i(y)) with beta_i(y) = theta(y)(w_i + gbar_i). The estimator's index
is Lambda(-x'beta), so fitted coefficients carry the opposite sign; the
harness flips the fitted field before projecting so that reported theta(y)
curves match the design convention.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .bootstrap import _assemble_band, band_qe, theta_draws, vec_curve
from .counterfactual import CharTransform, CovariateTransform
from .debias import attach_cell_stats, debias_analytical, debias_jackknife, default_nw_lags
from .drfit import FitOptions, fit_field
from .panel import (
    PanelDataset,
    PanelDesign,
    ThresholdGrid,
    UnitDesign,
    UnitSeries,
    build_regressors,
    quantile_grid_from_values,
)
from .projection import plugin_variances, project_field

logger = logging.getLogger(__name__)

THETA_GRID = np.round(np.arange(1.7, 2.31, 0.1), 10)


def theta_curve(y) -> np.ndarray:
    return 3.0 * np.sign(np.asarray(y) - 2.0) * (np.asarray(y) - 2.0) ** 2


def theta_inverse(u) -> np.ndarray:
    return 2.0 + np.sign(u) * np.sqrt(np.abs(u) / 3.0)


def child_rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=path)))


def child_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=path).generate_state(1)[0])


def sidak_critical(level: float, n_points: int) -> float:
    """Gaussian critical value for a joint band from per-point intervals."""
    return float(ndtri(0.5 * (1.0 + level ** (1.0 / n_points))))


# ---------------------------------------------------------------------------
# toy design: sample means with heterogeneous unit means
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDesign:
    n_units: int = 100
    n_periods: int = 10
    var_grid: tuple = tuple(np.round(np.arange(0.0, 1.01, 0.1), 10))
    theta: float = 1.0
    reps: int = 1000
    n_draws: int = 500


def toy_experiment(design: ToyDesign, seed: int = 0) -> pd.DataFrame:
    """Mean of the three variance estimators against the true sd.

    True sd is sqrt(Var(e)/(NT) + Var(beta)/N); the standard plug-in adds
    both sample terms (labelled over), the heterogeneity-blind one keeps
    only the first (under), the bootstrap resamples unit means.
    """
    N, T = design.n_units, design.n_periods
    rows = []
    for vi, var_b in enumerate(design.var_grid):
        sds = np.empty((design.reps, 3))
        for r in range(design.reps):
            rng = child_rng(seed, vi, r)
            beta = design.theta + np.sqrt(var_b) * rng.normal(size=N)
            e = rng.normal(size=(N, T))
            bhat = beta + e.mean(axis=1)
            that = bhat.mean()
            within = np.sum((e - e.mean(axis=1, keepdims=True)) ** 2)
            v_under = within / (N * T) ** 2
            v_over = v_under + np.sum((bhat - that) ** 2) / N**2
            idx = rng.integers(0, N, size=(design.n_draws, N))
            boots = bhat[idx].mean(axis=1)
            sds[r] = (np.sqrt(v_over), np.sqrt(v_under), np.std(boots, ddof=1))
        rows.append(
            {
                "var_beta": var_b,
                "true_sd": np.sqrt(1.0 / (N * T) + var_b / N),
                "plugin_over": sds[:, 0].mean(),
                "plugin_under": sds[:, 1].mean(),
                "bootstrap": sds[:, 2].mean(),
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# dynamic heterogeneous DR design
# ---------------------------------------------------------------------------


def generate_dynamic_dr(
    n_units: int, n_periods: int, seed: int, w_shift: float = 0.0, burn_in: int = 0
) -> PanelDataset:
    """Simulate the dynamic probit-DR panel.

    ``burn_in`` extra periods are simulated and discarded so that the
    retained window starts from (approximate) stationarity; the QTE
    experiment needs this so its quantile levels stay inside the region
    where every unit's coefficients are identified. ``w_shift`` perturbs
    w_i in the data-generating process (truth oracle only).
    """
    rng = child_rng(seed, 0)
    w = rng.uniform(1.5, 2.5, n_units)
    gbar = rng.uniform(-0.5, 0.5, n_units)
    total = n_periods + burn_in
    y = np.empty((n_units, total + 1))
    y[:, 0] = rng.uniform(0.52, 1.52, n_units)
    scale = w + w_shift + gbar
    for t in range(1, total + 1):
        e = rng.normal(size=n_units)
        y[:, t] = theta_inverse(e / (y[:, t - 1] * scale))
    y = y[:, burn_in:]
    units = [UnitSeries(unit_id=i, times=np.arange(n_periods + 1), y=y[i]) for i in range(n_units)]
    return PanelDataset(
        units=units, char_z=w[:, None], char_w=w[:, None], z_names=["w"], w_names=["w"]
    )


COVERAGE_METHODS = ("proposed", "no_debias", "conser_boot", "plugin_over", "plugin_under")


def slope_only_design(design: PanelDesign) -> PanelDesign:
    """Drop the constant: the dynamic design's index is y_{t-1} beta_i(y)."""
    units = [
        UnitDesign(u.unit_id, np.ascontiguousarray(u.X[:, 1:2]), u.y, u.times)
        for u in design.units
    ]
    return PanelDesign(units=units, lags=design.lags, colnames=["y_lag1"],
                       dataset=design.dataset)


def _coverage_one_rep(
    n_periods, n_units, methods, n_draws, level, nw_lags, rep_seed
) -> dict:
    ds = generate_dynamic_dr(n_units, n_periods, rep_seed)
    design = slope_only_design(build_regressors(ds, lags=1))
    grid = ThresholdGrid(THETA_GRID)
    truth = theta_curve(grid.points)
    lags = nw_lags if nw_lags is not None else default_nw_lags(n_periods)
    eta = np.array([1.0])

    field = fit_field(design, grid, "probit")
    f_deb = debias_analytical(field, lags)
    out = {}

    def band_cover(fld, stream_seed, studentize=True, draws=None):
        # sign flip: the DR index is -x'beta while the design uses +x'beta
        fl = fld.with_beta(-fld.beta)
        proj = project_field(fl, ds.char_z, ds.char_w)
        est = vec_curve(proj.theta) @ eta
        if draws is None:
            draws = theta_draws(fl, proj.z, proj.w, n_draws, stream_seed)
        dvals = vec_curve(draws.reshape(-1, 1, 1)).reshape(n_draws, -1, 1) @ eta
        band = _assemble_band("projection", grid.points, est, dvals, level, "iqr",
                              studentize=studentize)
        return band.covers(truth), draws, est, proj, fl

    if "proposed" in methods or "conser_boot" in methods:
        cov, draws_deb, _, _, _ = band_cover(f_deb, child_seed(rep_seed, 1))
        out["proposed"] = cov
        if "conser_boot" in methods:
            band2 = band_cover(f_deb, child_seed(rep_seed, 1), studentize=False,
                               draws=draws_deb)
            out["conser_boot"] = band2[0]
    if "no_debias" in methods:
        out["no_debias"] = band_cover(field, child_seed(rep_seed, 2))[0]
    if "plugin_over" in methods or "plugin_under" in methods:
        fl_deb = f_deb.with_beta(-f_deb.beta)
        proj_deb = project_field(fl_deb, ds.char_z, ds.char_w)
        est = vec_curve(proj_deb.theta) @ eta
        q = sidak_critical(level, len(grid))
        s_over = np.empty(len(grid))
        s_under = np.empty(len(grid))
        for g, y in enumerate(grid.points):
            pv = plugin_variances(fl_deb, proj_deb, y)
            s_over[g] = np.sqrt(eta @ pv.sigma_over() @ eta)
            s_under[g] = np.sqrt(eta @ pv.sigma_under() @ eta)
        dev = np.abs(est - truth)
        out["plugin_over"] = bool(np.all(dev <= q * s_over))
        out["plugin_under"] = bool(np.all(dev <= q * s_under))
    return out


def coverage_experiment(
    n_periods: int,
    n_units: int,
    methods: Sequence[str] = COVERAGE_METHODS,
    reps: int = 200,
    n_draws: int = 200,
    seed: int = 0,
    level: float = 0.95,
    nw_lags: Optional[int] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """Joint coverage of {theta(y)} bands across inference methods."""
    unknown = set(methods) - set(COVERAGE_METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    args = [
        (n_periods, n_units, methods, n_draws, level, nw_lags, child_seed(seed, r))
        for r in range(reps)
    ]
    if n_jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_coverage_one_rep)(*a) for a in args)
    else:
        results = [_coverage_one_rep(*a) for a in args]
    rows = [
        {
            "T": n_periods,
            "N": n_units,
            "method": m,
            "coverage": float(np.mean([r[m] for r in results])),
            "reps": reps,
            "draws": n_draws,
            "level": level,
        }
        for m in methods
    ]
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# QTE experiment
# ---------------------------------------------------------------------------

QTE_TAUS = (0.15, 0.25, 0.50, 0.75, 0.85)
QTE_ORACLE_SEED = 914208053
QTE_BURN_IN = 20


def qe_truth_oracle(
    shift: float,
    taus: Sequence[float],
    size: int = 1_000_000,
    seed: int = QTE_ORACLE_SEED,
    cache_dir: Optional[Path] = None,
    burn_in: int = QTE_BURN_IN,
) -> np.ndarray:
    """True one-period QE of a w_i increase, by large-scale simulation.

    Draws ``size`` units, burns them to stationarity, advances one period
    under the actual and shifted designs with common shocks and common lag
    values, and differences the empirical quantiles. Cached to disk keyed
    by (shift, size, burn_in, seed, taus).
    """
    taus = np.asarray(taus, dtype=float)
    cache = None
    if cache_dir is not None:
        key = f"qe_oracle_s{shift:g}_n{size}_b{burn_in}_seed{seed}_" + "_".join(
            f"{t:g}" for t in taus
        )
        cache = Path(cache_dir) / (key + ".npz")
        if cache.exists():
            return np.load(cache)["qe"]
    rng = child_rng(seed, 77)
    w = rng.uniform(1.5, 2.5, size)
    gbar = rng.uniform(-0.5, 0.5, size)
    y = rng.uniform(0.52, 1.52, size)
    for _ in range(burn_in):
        y = theta_inverse(rng.normal(size=size) / (y * (w + gbar)))
    e = rng.normal(size=size)
    y1 = theta_inverse(e / (y * (w + gbar)))
    y1_g = theta_inverse(e / (y * (w + shift + gbar)))
    qe = np.quantile(y1_g, taus) - np.quantile(y1, taus)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        np.savez(cache, qe=qe)
    return qe


QTE_METHODS = ("no_debias", "analytical", "jackknife")


def _qte_one_rep(n_units, n_periods, shift, methods, n_draws, level, nw_lags,
                 grid_levels, taus, rep_seed) -> dict:
    ds = generate_dynamic_dr(n_units, n_periods, rep_seed, burn_in=QTE_BURN_IN)
    design = slope_only_design(build_regressors(ds, lags=1))
    grid = quantile_grid_from_values(design.pooled_outcomes(), grid_levels)
    lags = nw_lags if nw_lags is not None else default_nw_lags(n_periods)
    opts = FitOptions()

    raw = fit_field(design, grid, "probit", opts)
    fields = {}
    if "no_debias" in methods:
        fields["no_debias"] = (raw, False)
    stats = None
    if "analytical" in methods or "jackknife" in methods:
        stats = attach_cell_stats(raw, lags)
    if "analytical" in methods:
        fields["analytical"] = (debias_analytical(stats, lags), True)
    if "jackknife" in methods:
        fields["jackknife"] = (
            debias_jackknife(design, grid, "probit", opts, lags, field=stats),
            True,
        )

    gt = CharTransform(kind="add_value", column=0, value=shift)
    out = {}
    for mi, (name, (fld, bias_on)) in enumerate(fields.items()):
        proj = project_field(fld, ds.char_z, ds.char_w)
        band = band_qe(
            fld, CovariateTransform(), gt, proj, period=1, levels=taus,
            n_draws=n_draws, level=level, seed=child_seed(rep_seed, 10 + mi),
            bias_correct=bias_on,
        )
        out[name] = band
    return out


def qte_experiment(
    n_units: int = 200,
    n_periods: int = 50,
    shift: float = 0.5,
    methods: Sequence[str] = QTE_METHODS,
    reps: int = 200,
    n_draws: int = 200,
    seed: int = 0,
    level: float = 0.95,
    nw_lags: Optional[int] = None,
    taus: Sequence[float] = QTE_TAUS,
    grid_step: float = 0.0005,
    oracle_size: int = 1_000_000,
    cache_dir: Optional[Path] = None,
    n_jobs: int = 1,
) -> pd.DataFrame:
    """MSE and coverage of the counterfactual QE estimators at five levels.

    Truth comes from the large-sample oracle; pointwise coverage uses the
    per-level bootstrap critical value, joint coverage the sup-t band.
    """
    unknown = set(methods) - set(QTE_METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    taus = np.asarray(taus, dtype=float)
    truth = qe_truth_oracle(shift, taus, oracle_size, cache_dir=cache_dir)
    grid_levels = np.arange(grid_step, 1.0 - grid_step / 2, grid_step)
    args = [
        (n_units, n_periods, shift, methods, n_draws, level, nw_lags,
         grid_levels, taus, child_seed(seed, r))
        for r in range(reps)
    ]
    if n_jobs != 1:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(delayed(_qte_one_rep)(*a) for a in args)
    else:
        results = [_qte_one_rep(*a) for a in args]

    rows = []
    for name in methods:
        bands = [r[name] for r in results]
        est = np.array([b.estimate for b in bands])
        mse = np.nanmean((est - truth[None, :]) ** 2, axis=0)
        joint = np.mean([b.covers(truth) for b in bands])
        pt_cover = np.zeros(len(taus))
        for b in bands:
            # per-level interval: same draws, per-point critical value
            centered = b.draws - b.estimate[None, :]
            ratio = np.abs(centered) / b.scale[None, :]
            crit_pt = np.nanquantile(ratio, level, axis=0)
            lo = b.estimate - crit_pt * b.scale
            hi = b.estimate + crit_pt * b.scale
            pt_cover += (lo <= truth) & (truth <= hi)
        pt_cover /= len(bands)
        for j, t in enumerate(taus):
            rows.append({
                "method": name, "tau": t, "mse": mse[j],
                "coverage": pt_cover[j], "joint_coverage": joint,
                "true_qe": truth[j], "reps": reps, "draws": n_draws,
            })
    return pd.DataFrame(rows)
