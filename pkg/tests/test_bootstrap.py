import numpy as np
import pytest

import hdrpanel.bootstrap as bt
from hdrpanel.bootstrap import (
    band_conservative,
    band_distribution,
    band_projection,
    band_qe,
    resample_units,
    rng_for_draw,
    scale_estimate,
)
from hdrpanel.counterfactual import CharTransform, CovariateTransform
from hdrpanel.debias import attach_cell_stats
from hdrpanel.drfit import fit_field
from hdrpanel.panel import ThresholdGrid, build_regressors, quantile_grid_from_values
from hdrpanel.projection import project_field

from conftest import simulate_logit_panel
from test_projection import synthetic_field


def test_resample_single_unit():
    idx = resample_units(1, rng_for_draw(0, 0))
    assert np.all(idx == 0)


def test_resample_deterministic_given_seed():
    a = resample_units(100, rng_for_draw(7, 3))
    b = resample_units(100, rng_for_draw(7, 3))
    c = resample_units(100, rng_for_draw(7, 4))
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_resample_distinct_fraction():
    n = 10_000
    idx = resample_units(n, rng_for_draw(1, 0))
    frac = len(np.unique(idx)) / n
    assert frac == pytest.approx(1 - np.exp(-1), abs=0.02)


def test_scale_estimate_normal_draws():
    rng = np.random.default_rng(2)
    draws = rng.normal(size=10_000)
    for method in ("sd", "iqr"):
        s, degenerate = scale_estimate(draws, method)
        assert not degenerate
        assert s == pytest.approx(1.0, rel=0.03)


def test_scale_estimate_degenerate_flagged():
    s, degenerate = scale_estimate(np.full(50, 3.14), "iqr")
    assert degenerate and s == 1e-12


def test_scale_estimate_heavy_tails_iqr_below_sd():
    rng = np.random.default_rng(3)
    draws = rng.standard_t(df=3, size=20_000)
    s_iqr, _ = scale_estimate(draws, "iqr")
    s_sd, _ = scale_estimate(draws, "sd")
    assert s_iqr < s_sd


def test_scale_estimate_needs_draws():
    with pytest.raises(ValueError):
        scale_estimate(np.arange(5.0), "sd")


def make_field(n_units=25, seed=0, n_grid=3):
    rng = np.random.default_rng(seed)
    beta = rng.normal(size=(n_units, n_grid, 2)) + np.array([1.0, -0.5])
    field = synthetic_field(beta)
    z = rng.normal(size=(n_units, 1)) + 2.0
    return field, z


def test_band_projection_deterministic_and_contains_estimate():
    field, z = make_field()
    eta = np.array([1.0, 0.0])
    b1 = band_projection(field, z, z, eta, n_draws=60, seed=42)
    b2 = band_projection(field, z, z, eta, n_draws=60, seed=42)
    assert np.array_equal(b1.lo, b2.lo) and np.array_equal(b1.hi, b2.hi)
    assert b1.crit >= 0
    keep = ~b1.dropped
    assert np.all(b1.lo[keep] <= b1.estimate[keep])
    assert np.all(b1.estimate[keep] <= b1.hi[keep])


def test_band_degenerate_field_flagged():
    field, _ = make_field()
    field.beta[:] = np.array([0.4, 0.7])  # every unit identical
    z = np.ones((field.n_units, 1))
    band = band_projection(field, z, z, np.array([1.0, 0.0]), n_draws=40, seed=1)
    assert band.degenerate.any()
    assert any("degenerate" in f for f in band.flags)


def test_band_low_draw_count_flagged():
    field, z = make_field()
    band = band_projection(field, z, z, np.array([1.0, 0.0]), n_draws=2, seed=5)
    assert band.crit >= 0
    assert any("low draw count" in f for f in band.flags)


def test_conservative_band_constant_width():
    field, z = make_field()
    eta = np.array([0.0, 1.0])
    band = band_conservative(field, z, z, eta, n_draws=50, seed=9)
    widths = band.hi - band.lo
    keep = ~band.dropped
    assert np.allclose(widths[keep], widths[keep][0])


def prep_panel_field(seed=31, n_units=30, n_periods=40):
    ds = simulate_logit_panel(n_units, n_periods, seed=seed)
    design = build_regressors(ds, lags=1)
    grid = quantile_grid_from_values(design.pooled_outcomes(), np.linspace(0.15, 0.85, 15))
    field = attach_cell_stats(fit_field(design, grid, "logit"), 1)
    rng = np.random.default_rng(seed + 1)
    z = rng.normal(size=(n_units, 1)) + 2.0
    return ds, design, field, z


def test_qe_band_identity_transforms_degenerate_zero():
    ds, design, field, z = prep_panel_field()
    proj = project_field(field, z, z)
    period = float(design.units[0].times[-1])
    band = band_qe(field, CovariateTransform(), CharTransform(), proj, period,
                   levels=[0.25, 0.5, 0.75], n_draws=30, seed=3)
    assert np.all(band.estimate[~band.dropped] == 0.0)
    assert np.all(band.draws[np.isfinite(band.draws)] == 0.0)
    assert band.degenerate.any()


def test_qe_band_draw_coupling_one_resample_per_draw(monkeypatch):
    ds, design, field, z = prep_panel_field()
    proj = project_field(field, z, z)
    period = float(design.units[0].times[-1])
    calls = []
    orig = bt.resample_units

    def spy(n, rng):
        idx = orig(n, rng)
        calls.append(idx.copy())
        return idx

    monkeypatch.setattr(bt, "resample_units", spy)
    n_draws = 12
    band_qe(field, CovariateTransform(), CharTransform("add_value", 0, 0.3), proj,
            period, levels=[0.3, 0.6], n_draws=n_draws, seed=8)
    # one index multiset per draw, shared by F* and G* (plus possible retries)
    assert len(calls) == n_draws


def test_band_distribution_counterfactual_runs_and_brackets():
    ds, design, field, z = prep_panel_field()
    proj = project_field(field, z, z)
    period = float(design.units[0].times[-1])
    band = band_distribution(field, CovariateTransform(), CharTransform("add_value", 0, 0.5),
                             proj, period, n_draws=40, seed=4)
    keep = ~band.dropped
    assert np.all(band.lo[keep] <= band.estimate[keep] + 1e-12)
    assert np.all(band.estimate[keep] <= band.hi[keep] + 1e-12)
    assert band.n_draws == 40


def test_band_width_scales_with_units():
    # halving N widens the scale function by about sqrt(2)
    widths = {}
    for n_units in (80, 40):
        rng = np.random.default_rng(5)
        beta = rng.normal(size=(n_units, 1, 2)) * 0.7
        field = synthetic_field(beta)
        z = np.ones((n_units, 1))
        band = band_projection(field, z, z, np.array([1.0, 0.0]), n_draws=400, seed=11)
        widths[n_units] = band.scale[0]
    assert widths[40] / widths[80] == pytest.approx(np.sqrt(2.0), rel=0.35)


def test_conservative_close_to_studentized_on_flat_variance():
    # when draw dispersion is constant across the grid, the unstudentized
    # constant-width band is close to the studentized one
    rng = np.random.default_rng(21)
    n_units, G = 60, 5
    beta = rng.normal(size=(n_units, G, 2))  # same dispersion at every point
    field = synthetic_field(beta)
    z = np.ones((n_units, 1))
    eta = np.array([1.0, 0.0])
    stud = band_projection(field, z, z, eta, n_draws=400, seed=2)
    cons = band_conservative(field, z, z, eta, n_draws=400, seed=2)
    w_stud = (stud.hi - stud.lo)[~stud.dropped]
    w_cons = (cons.hi - cons.lo)[~cons.dropped]
    assert np.allclose(w_cons, w_cons[0])
    assert np.abs(w_cons.mean() / w_stud.mean() - 1) < 0.2


def test_qe_band_covers_location_shift():
    # homogeneous AR(1)-logistic panel: shifting the lag by c moves the
    # one-step-ahead distribution by rho*c uniformly; the band must cover
    # that constant at every level
    rho, kappa = 0.4, 0.3
    ds = simulate_logit_panel(80, 60, rho=rho, seed=44)
    design = build_regressors(ds, lags=1)
    grid = quantile_grid_from_values(design.pooled_outcomes(), np.arange(0.02, 0.99, 0.01))
    field = attach_cell_stats(fit_field(design, grid, "logit"), 1)
    period = float(design.units[0].times[-1])
    true_shift = rho * np.log1p(-kappa)
    band = band_qe(field, CovariateTransform("flat_tax", kappa=kappa), CharTransform(),
                   None, period, levels=[0.25, 0.5, 0.75], n_draws=120, seed=5,
                   level=0.95)
    keep = ~band.dropped
    assert keep.any()
    assert np.all(band.lo[keep] <= true_shift) and np.all(true_shift <= band.hi[keep])


@pytest.mark.parametrize("var_beta", [0.0, 0.5, 1.0])
def test_nominal_coverage_toy_model(var_beta):
    # uniform-validity property at desk scale: 90% band for theta covers at
    # 90% +/- 3pp over 500 replications, any heterogeneity strength
    N, T, B, R, level = 100, 10, 200, 500, 0.90
    theta = 1.0
    rng = np.random.default_rng(int(var_beta * 10) + 17)
    hits = 0
    for r in range(R):
        beta = theta + np.sqrt(var_beta) * rng.normal(size=N)
        bhat = beta + rng.normal(size=(N, T)).mean(axis=1)
        that = bhat.mean()
        idx = rng.integers(0, N, size=(B, N))
        draws = bhat[idx].mean(axis=1)
        s, _ = scale_estimate(draws, "iqr")
        q = float(np.quantile(np.abs(draws - that) / s, level, method="higher"))
        hits += abs(that - theta) <= q * s
    assert hits / R == pytest.approx(level, abs=0.03)
