"""Command-line front end.

Subcommands: fit, project, dist, markov, mobility, qe, simulate. Every
command writes CSV tables plus a JSON manifest (resolved config, seed,
versions) so any output can be reproduced bit-identically.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import bootstrap as bt
from . import counterfactual as cf
from . import markov as mk
from .config import ConfigError, RunConfig, build_config, parse_levels, write_manifest
from .debias import attach_cell_stats, debias_analytical, debias_jackknife
from .drfit import STATUS_NAMES, fit_field
from .panel import PanelError, build_regressors, load_panel, pooled_threshold_grid
from .projection import project_field
from .quantiles import quantile_effect

logger = logging.getLogger(__name__)


def _write_csv(df: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n")
    return path


def _load_and_fit(cfg: RunConfig):
    if not cfg.input:
        raise ConfigError("an input CSV is required (config key 'input' or --input)")
    schema = {"unit": cfg.unit_col, "time": cfg.time_col, "y": cfg.y_col}
    ds = load_panel(cfg.input, schema)
    design = build_regressors(ds, lags=cfg.lags)
    grid = pooled_threshold_grid(ds, cfg.levels())
    field = fit_field(design, grid, cfg.link)
    if cfg.debias == "analytical":
        field = debias_analytical(field, cfg.nw_lags)
    elif cfg.debias == "jackknife":
        field = debias_jackknife(design, grid, cfg.link, nw_lags=cfg.nw_lags, field=field)
    else:
        field = attach_cell_stats(field, cfg.nw_lags)
    return ds, design, grid, field


def _parse_transform(spec: str) -> cf.CovariateTransform:
    spec = (spec or "none").strip()
    if spec in ("none", ""):
        return cf.CovariateTransform()
    if spec == "prog":
        return cf.CovariateTransform(kind="progressive_tax")
    if spec.startswith("flat:"):
        return cf.CovariateTransform(kind="flat_tax", kappa=float(spec.split(":", 1)[1]))
    if spec.startswith("custom:"):
        rows = pd.read_csv(spec.split(":", 1)[1]).sort_values("unit")
        cols = [c for c in rows.columns if c != "unit"]
        return cf.CovariateTransform(kind="custom", custom_rows=rows[cols].to_numpy(float))
    raise ConfigError(f"unknown covariate transform {spec!r}")


def _parse_gtransform(spec: str, z_names) -> cf.CharTransform:
    spec = (spec or "none").strip()
    if spec in ("none", ""):
        return cf.CharTransform()
    kind, _, rest = spec.partition(":")
    opts = dict(kv.split("=", 1) for kv in rest.split(",") if kv)
    if "col" not in opts:
        raise ConfigError(f"characteristic transform needs col=<name>: {spec!r}")
    try:
        col = z_names.index(opts["col"]) if opts["col"] in z_names else int(opts["col"])
    except ValueError as exc:
        raise ConfigError(f"unknown characteristic column {opts['col']!r}") from exc
    if kind == "min":
        return cf.CharTransform(kind="min_value", column=col, value=float(opts["floor"]))
    if kind == "add":
        return cf.CharTransform(kind="add_value", column=col, value=float(opts["delta"]))
    raise ConfigError(f"unknown characteristic transform {spec!r}")


def cmd_fit(cfg: RunConfig, out_dir: Path) -> list:
    _, design, grid, field = _load_and_fit(cfg)
    rows = []
    for i, u in enumerate(design.units):
        for g, y in enumerate(grid.points):
            for j in range(field.d_x):
                rows.append({
                    "unit": u.unit_id, "y": y, "coef": design.colnames[j],
                    "value": field.beta[i, g, j],
                    "status": STATUS_NAMES[int(field.status[i, g])],
                })
    return [_write_csv(pd.DataFrame(rows), out_dir / "coefficients.csv")]


def cmd_project(cfg: RunConfig, out_dir: Path) -> list:
    ds, design, grid, field = _load_and_fit(cfg)
    if ds.char_z is None:
        raise ConfigError("projection needs z_* characteristic columns")
    proj = project_field(field, ds.char_z, ds.effective_w())
    znames = ds.z_names or [f"z{a}" for a in range(proj.z.shape[1])]
    cols = {"y": grid.points}
    for a, zn in enumerate(znames):
        for j, cn in enumerate(design.colnames):
            cols[f"{cn}_x_{zn}"] = proj.theta[:, j, a]
    df = pd.DataFrame(cols)
    out = [_write_csv(df, out_dir / "theta.csv")]
    if cfg.boot_b > 0:
        rows = []
        for a, zn in enumerate(znames):
            for j, cn in enumerate(design.colnames):
                eta = np.zeros(field.d_x * proj.z.shape[1])
                eta[a * field.d_x + j] = 1.0
                band = bt.band_projection(field, proj.z, proj.w, eta, cfg.boot_b,
                                          cfg.boot_level, cfg.seed, cfg.boot_scale, proj=proj)
                for g, y in enumerate(grid.points):
                    rows.append({"y": y, "component": f"{cn}_x_{zn}",
                                 "estimate": band.estimate[g], "lo": band.lo[g],
                                 "hi": band.hi[g]})
        out.append(_write_csv(pd.DataFrame(rows), out_dir / "theta_bands.csv"))
    return out


def cmd_dist(cfg: RunConfig, out_dir: Path) -> list:
    ds, design, grid, field = _load_and_fit(cfg)
    transform = _parse_transform(cfg.transform)
    gt = _parse_gtransform(cfg.gtransform, ds.z_names)
    period = cfg.period if cfg.period is not None else float(design.units[0].times[-1])
    bias_on = cfg.debias != "none"
    fhat = cf.estimate_distribution(field, period=period, bias_correct=bias_on, label="F")
    cols = {"y": grid.points, "F": fhat.values}
    proj = None
    if transform.kind != "identity" or gt.kind != "identity":
        gfield = field
        if gt.kind != "identity":
            if ds.char_z is None:
                raise ConfigError("a g-transform needs z_* characteristic columns")
            proj = project_field(field, ds.char_z, ds.effective_w())
            gfield = cf.counterfactual_coefficients(field, proj, gt)
        ghat = cf.estimate_distribution(gfield, transform, period=period,
                                        bias_correct=bias_on, label="G")
        cols["G"] = ghat.values
        if cfg.boot_b > 0:
            band = bt.band_distribution(field, transform, gt, proj, period,
                                        cfg.boot_b, cfg.boot_level, cfg.seed,
                                        cfg.boot_scale, bias_correct=bias_on)
            cols["G_lo"], cols["G_hi"] = band.lo, band.hi
    return [_write_csv(pd.DataFrame(cols), out_dir / "dist.csv")]


def cmd_qe(cfg: RunConfig, out_dir: Path) -> list:
    ds, design, grid, field = _load_and_fit(cfg)
    transform = _parse_transform(cfg.transform)
    gt = _parse_gtransform(cfg.gtransform, ds.z_names)
    if transform.kind == "identity" and gt.kind == "identity":
        raise ConfigError("qe needs --transform and/or --gtransform")
    period = cfg.period if cfg.period is not None else float(design.units[0].times[-1])
    bias_on = cfg.debias != "none"
    taus = cfg.tau_levels()
    proj = None
    gfield = field
    if gt.kind != "identity":
        proj = project_field(field, ds.char_z, ds.effective_w())
        gfield = cf.counterfactual_coefficients(field, proj, gt)
    fhat = cf.estimate_distribution(field, period=period, bias_correct=bias_on)
    ghat = cf.estimate_distribution(gfield, transform, period=period, bias_correct=bias_on)
    curve = quantile_effect(fhat, ghat, taus)
    cols = {"tau": taus, "qe": curve.values}
    if cfg.boot_b > 0:
        band = bt.band_qe(field, transform, gt, proj, period, taus, cfg.boot_b,
                          cfg.boot_level, cfg.seed, cfg.boot_scale, bias_correct=bias_on)
        cols["lo"], cols["hi"] = band.lo, band.hi
    return [_write_csv(pd.DataFrame(cols), out_dir / "qe.csv")]


def cmd_markov(cfg: RunConfig, out_dir: Path) -> list:
    ds, design, grid, field = _load_and_fit(cfg)
    rows = []
    for u in design.units:
        try:
            chain = mk.chain_from_unit(u, cfg.link)
        except PanelError as exc:
            logger.warning("unit %s skipped: %s", u.unit_id, exc)
            continue
        if not chain.ok:
            logger.warning("unit %s flagged: %s", u.unit_id, chain.flag)
            continue
        pi = chain.pi
        if cfg.pi_jackknife:
            corrected = mk.jackknife_pi(u, cfg.link)
            if corrected is not None:
                pi = corrected
            else:
                logger.warning("unit %s: jackknife not identified, uncorrected pi kept", u.unit_id)
        for s, p in zip(chain.states, pi):
            rows.append({"unit": u.unit_id, "state": s, "pi": p})
    return [_write_csv(pd.DataFrame(rows), out_dir / "markov.csv")]


def cmd_mobility(cfg: RunConfig, out_dir: Path) -> list:
    ds, design, grid, field = _load_and_fit(cfg)
    pooled = design.pooled_outcomes()
    p_levels = parse_levels(cfg.p_levels)
    q_levels = parse_levels(cfg.q_levels)
    horizons = [int(h) for h in str(cfg.horizons).split(",")]
    mob_taus = parse_levels(cfg.mob_taus)
    chains = []
    for u in design.units:
        try:
            chains.append(mk.chain_from_unit(u, cfg.link))
        except PanelError:
            continue
    rows = []
    for p in p_levels:
        y_p = float(np.quantile(pooled, p, method="inverted_cdf"))
        for q in q_levels:
            y_q = float(np.quantile(pooled, q, method="inverted_cdf"))
            for h in horizons:
                vals = []
                for c in chains:
                    if not c.ok:
                        continue
                    try:
                        vals.append(mk.mobility(c, y_p, y_q, h))
                    except PanelError:
                        continue
                if not vals:
                    continue
                summ = mk.aggregate_mobility(vals, mob_taus, p=p, q=q, h=h)
                rows.append({"p": p, "q": q, "h": h, "stat": "mean",
                             "value": summ.mean, "n_units": len(summ.unit_values)})
                for t, v in summ.quantiles.items():
                    rows.append({"p": p, "q": q, "h": h, "stat": f"q{t:g}",
                                 "value": v, "n_units": len(summ.unit_values)})
    return [_write_csv(pd.DataFrame(rows), out_dir / "mobility.csv")]


def cmd_simulate(cfg: RunConfig, out_dir: Path, which: str, reps, draws, paper_scale,
                 n_jobs, sim_t, sim_n) -> list:
    from . import simulate as sim

    if paper_scale:
        logger.warning("paper-scale run: expect a long runtime")
    if which == "toy":
        design = sim.ToyDesign(reps=reps or (5000 if paper_scale else 1000),
                               n_draws=draws or (1000 if paper_scale else 500))
        df = sim.toy_experiment(design, seed=cfg.seed)
        name = "toy.csv"
    elif which == "coverage":
        df = sim.coverage_experiment(
            n_periods=sim_t, n_units=sim_n,
            reps=reps or (1000 if paper_scale else 200),
            n_draws=draws or (500 if paper_scale else 200),
            seed=cfg.seed, n_jobs=n_jobs,
        )
        name = "coverage.csv"
    elif which == "qte":
        df = sim.qte_experiment(
            reps=reps or (1000 if paper_scale else 200),
            n_draws=draws or (500 if paper_scale else 200),
            seed=cfg.seed, cache_dir=out_dir, n_jobs=n_jobs,
        )
        name = "qte.csv"
    else:
        raise ConfigError(f"unknown simulation {which!r}")
    out = [_write_csv(df, out_dir / name)]
    long = df.melt(id_vars=[c for c in df.columns if df[c].dtype == object or c in
                            ("var_beta", "tau", "T", "N", "method")])
    out.append(_write_csv(long, out_dir / name.replace(".csv", "_long.csv")))
    return out


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrpanel",
                                     description="Heterogeneous distribution regression for panels")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--manifest", help="reproduce from a manifest JSON")
    common.add_argument("--input")
    common.add_argument("--link", choices=["logit", "probit"])
    common.add_argument("--lags", type=int)
    common.add_argument("--grid-levels", dest="grid_levels")
    common.add_argument("--debias", choices=["analytical", "jackknife", "none"])
    common.add_argument("--nw-lags", dest="nw_lags", type=int)
    common.add_argument("--transform")
    common.add_argument("--gtransform")
    common.add_argument("--period", type=float)
    common.add_argument("--taus")
    common.add_argument("--boot-b", dest="boot_b", type=int)
    common.add_argument("--boot-level", dest="boot_level", type=float)
    common.add_argument("--boot-scale", dest="boot_scale", choices=["iqr", "sd"])
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--p-levels", dest="p_levels")
    common.add_argument("--q-levels", dest="q_levels")
    common.add_argument("--horizons")
    common.add_argument("--pi-jackknife", dest="pi_jackknife", type=int, choices=[0, 1])
    for name in ("fit", "project", "dist", "markov", "mobility", "qe"):
        sub.add_parser(name, parents=[common])
    psim = sub.add_parser("simulate", parents=[common])
    psim.add_argument("which", choices=["toy", "coverage", "qte"])
    psim.add_argument("--reps", type=int)
    psim.add_argument("--draws", type=int)
    psim.add_argument("--paper-scale", action="store_true")
    psim.add_argument("--jobs", type=int, default=1)
    psim.add_argument("--sim-t", dest="sim_t", type=int, default=100)
    psim.add_argument("--sim-n", dest="sim_n", type=int, default=300)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    override_keys = ("input", "link", "lags", "grid_levels", "debias", "nw_lags",
                     "transform", "gtransform", "period", "taus", "boot_b",
                     "boot_level", "boot_scale", "seed", "out", "p_levels",
                     "q_levels", "horizons", "pi_jackknife")
    overrides = {k: getattr(args, k, None) for k in override_keys}
    try:
        cfg = build_config(args.config, args.manifest, overrides)
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "simulate":
            outputs = cmd_simulate(cfg, out_dir, args.which, args.reps, args.draws,
                                   args.paper_scale, args.jobs, args.sim_t, args.sim_n)
            command = f"simulate_{args.which}"
        else:
            handler = {
                "fit": cmd_fit, "project": cmd_project, "dist": cmd_dist,
                "markov": cmd_markov, "mobility": cmd_mobility, "qe": cmd_qe,
            }[args.command]
            outputs = handler(cfg, out_dir)
            command = args.command
        manifest = write_manifest(out_dir, command, cfg, outputs)
        for p in outputs + [manifest]:
            print(p)
        return 0
    except (ConfigError, PanelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
