"""Panel data model: unbalanced units, lagged-design construction, threshold
grids, and per-threshold identification bookkeeping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


class PanelError(ValueError):
    pass


class DuplicateKeyError(PanelError):
    pass


class NonConstantCharacteristicError(PanelError):
    pass


class ShortSeriesError(PanelError):
    pass


@dataclass(frozen=True)
class UnitSeries:
    """One unit's time series; times strictly increasing, no interior gaps in y."""

    unit_id: object
    times: np.ndarray
    y: np.ndarray
    v: Optional[np.ndarray] = None  # (T, dv) time-varying covariates

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise PanelError(f"unit {self.unit_id}: time indices must be strictly increasing")
        if np.any(~np.isfinite(self.y)):
            raise PanelError(f"unit {self.unit_id}: missing or non-finite outcome values")
        if self.v is not None and np.any(~np.isfinite(self.v)):
            raise PanelError(f"unit {self.unit_id}: missing or non-finite covariate values")

    @property
    def n_periods(self) -> int:
        return len(self.y)


@dataclass
class PanelDataset:
    """Unbalanced panel plus per-unit time-invariant characteristics."""

    units: list[UnitSeries]
    char_z: Optional[np.ndarray] = None  # (N, dz)
    char_w: Optional[np.ndarray] = None  # (N, dw)
    z_names: list[str] = field(default_factory=list)
    w_names: list[str] = field(default_factory=list)
    v_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [u.unit_id for u in self.units]
        if len(set(ids)) != len(ids):
            raise DuplicateKeyError("unit ids must be unique")
        if self.char_z is not None and self.char_w is not None:
            if self.char_w.shape[1] < self.char_z.shape[1]:
                raise PanelError("dim(w_i) must be >= dim(z_i)")

    @property
    def n_units(self) -> int:
        return len(self.units)

    def pooled_outcomes(self) -> np.ndarray:
        return np.concatenate([u.y for u in self.units])

    def effective_w(self) -> Optional[np.ndarray]:
        """Instrument matrix; falls back to z (OLS case) when w is absent."""
        return self.char_w if self.char_w is not None else self.char_z


@dataclass(frozen=True)
class ThresholdGrid:
    """Strictly increasing evaluation points for the outcome distribution."""

    points: np.ndarray
    probe_levels: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            raise PanelError("threshold grid must be nonempty")
        if np.any(np.diff(pts) <= 0):
            raise PanelError("threshold grid must be strictly increasing")
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class UnitDesign:
    """Design rows x_t = (1, y_{t-1..t-L}, v_t')' paired with outcomes."""

    unit_id: object
    X: np.ndarray  # (T_use, d_x)
    y: np.ndarray  # (T_use,) responses
    times: np.ndarray


@dataclass
class PanelDesign:
    units: list[UnitDesign]
    lags: int
    colnames: list[str]
    dataset: PanelDataset

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def d_x(self) -> int:
        return self.units[0].X.shape[1]

    def pooled_outcomes(self) -> np.ndarray:
        return np.concatenate([u.y for u in self.units])


@dataclass
class IdentificationStatus:
    """Per (unit, threshold) labels: -1 below range, 0 identified, +1 above.

    Identified means y is inside [min_t y_it, max_t y_it) for the unit's
    usable outcomes, the half-open window on which the per-unit fit exists.
    """

    grid: ThresholdGrid
    labels: np.ndarray  # (N, G) int8

    @property
    def n0(self) -> np.ndarray:
        return np.sum(self.labels == -1, axis=0)

    @property
    def n1(self) -> np.ndarray:
        return np.sum(self.labels == 1, axis=0)

    @property
    def n01(self) -> np.ndarray:
        return np.sum(self.labels == 0, axis=0)


def load_panel(path, schema: Optional[dict] = None) -> PanelDataset:
    """Assemble a PanelDataset from a CSV file.

    Required columns ``unit``, ``time``, ``y`` (renameable through
    ``schema``); columns prefixed ``v_`` are time-varying covariates and
    ``z_`` / ``w_`` are time-invariant characteristics / instruments.
    """
    schema = schema or {}
    unit_col = schema.get("unit", "unit")
    time_col = schema.get("time", "time")
    y_col = schema.get("y", "y")
    df = pd.read_csv(path)
    for col in (unit_col, time_col, y_col):
        if col not in df.columns:
            raise PanelError(f"required column {col!r} missing from {path}")

    v_cols = schema.get("v", [c for c in df.columns if c.startswith("v_")])
    z_cols = schema.get("z", [c for c in df.columns if c.startswith("z_")])
    w_cols = schema.get("w", [c for c in df.columns if c.startswith("w_")])

    for col in [y_col, time_col, *v_cols, *z_cols, *w_cols]:
        try:
            df[col] = pd.to_numeric(df[col], errors="raise")
        except (ValueError, TypeError) as exc:
            raise PanelError(f"column {col!r} is not numeric: {exc}") from exc

    dup = df.duplicated(subset=[unit_col, time_col])
    if dup.any():
        first = df.loc[dup, [unit_col, time_col]].iloc[0]
        raise DuplicateKeyError(
            f"duplicated (unit, time) key: ({first[unit_col]}, {first[time_col]})"
        )

    units: list[UnitSeries] = []
    z_rows, w_rows = [], []
    for uid, grp in df.groupby(unit_col, sort=True):
        grp = grp.sort_values(time_col)
        for cols, rows in ((z_cols, z_rows), (w_cols, w_rows)):
            if cols:
                vals = grp[cols].to_numpy(dtype=float)
                if not np.all(np.isfinite(vals)) or not np.all(vals == vals[0]):
                    bad = [c for c in cols if grp[c].nunique(dropna=False) > 1]
                    raise NonConstantCharacteristicError(
                        f"unit {uid}: time-invariant column(s) {bad} vary over time"
                    )
                rows.append(vals[0])
        v = grp[v_cols].to_numpy(dtype=float) if v_cols else None
        units.append(
            UnitSeries(
                unit_id=uid,
                times=grp[time_col].to_numpy(),
                y=grp[y_col].to_numpy(dtype=float),
                v=v,
            )
        )
    return PanelDataset(
        units=units,
        char_z=np.asarray(z_rows) if z_rows else None,
        char_w=np.asarray(w_rows) if w_rows else None,
        z_names=list(z_cols),
        w_names=list(w_cols),
        v_names=list(v_cols),
    )


def build_regressors(ds: PanelDataset, lags: int = 1, include_v: bool = True) -> PanelDesign:
    """Construct x_it = (1, y_{i(t-1)}, ..., y_{i(t-L)}, v_it')' per unit.

    The first ``lags`` periods of each unit are consumed as initial
    conditions. Units left with no usable rows are dropped with a warning.
    """
    if lags < 0:
        raise PanelError("lags must be >= 0")
    has_v = [u.v is not None for u in ds.units]
    if include_v and any(has_v) and not all(has_v):
        raise PanelError("time-varying covariates present for some units only")
    use_v = include_v and all(has_v) and len(has_v) > 0
    out = []
    for u in ds.units:
        T = u.n_periods
        n_rows = T - lags
        if n_rows < 1:
            logger.warning("unit %s too short for %d lag(s); excluded", u.unit_id, lags)
            continue
        cols = [np.ones(n_rows)]
        for ell in range(1, lags + 1):
            cols.append(u.y[lags - ell : T - ell])
        if use_v:
            cols.append(u.v[lags:])
        X = np.column_stack(cols)
        out.append(
            UnitDesign(unit_id=u.unit_id, X=X, y=u.y[lags:].copy(), times=u.times[lags:].copy())
        )
    if not out:
        raise ShortSeriesError(f"no unit has more than {lags} periods")
    colnames = ["const"] + [f"y_lag{j}" for j in range(1, lags + 1)]
    if use_v:
        colnames += list(ds.v_names)
    return PanelDesign(units=out, lags=lags, colnames=colnames, dataset=ds)


def quantile_grid_from_values(values, levels) -> ThresholdGrid:
    """Type-1 (left-continuous inverse CDF) empirical quantiles, de-duplicated."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise PanelError("cannot build a grid from an empty sample")
    levels = np.asarray(levels, dtype=float)
    if np.any(levels <= 0) or np.any(levels >= 1) or np.any(np.diff(levels) <= 0):
        raise PanelError("levels must be strictly increasing inside (0, 1)")
    pts = np.quantile(values, levels, method="inverted_cdf")
    pts, idx = np.unique(pts, return_index=True)
    return ThresholdGrid(points=pts, probe_levels=levels[idx])


def pooled_threshold_grid(ds: PanelDataset, levels) -> ThresholdGrid:
    """Grid of empirical quantiles of y_it pooled across units and periods."""
    return quantile_grid_from_values(ds.pooled_outcomes(), levels)


def classify_identification(design: PanelDesign, grid: ThresholdGrid) -> IdentificationStatus:
    """Label each (unit, threshold) cell against the unit's usable outcome range."""
    G = len(grid)
    labels = np.zeros((design.n_units, G), dtype=np.int8)
    for i, u in enumerate(design.units):
        lo, hi = u.y.min(), u.y.max()
        labels[i, grid.points < lo] = -1
        labels[i, grid.points >= hi] = 1
    return IdentificationStatus(grid=grid, labels=labels)
