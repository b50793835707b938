import logging

import numpy as np
import pytest

from hdrpanel.panel import PanelDataset, UnitSeries, build_regressors

logging.getLogger("hdrpanel").setLevel(logging.ERROR)


def make_panel(y_matrix, z=None, w=None, times=None, v=None):
    """Panel from an (N, T) outcome array plus optional characteristics."""
    y_matrix = np.asarray(y_matrix, dtype=float)
    N, T = y_matrix.shape
    times = np.arange(T) if times is None else np.asarray(times)
    units = [
        UnitSeries(unit_id=i, times=times.copy(), y=y_matrix[i],
                   v=None if v is None else v[i])
        for i in range(N)
    ]
    def col(a):
        if a is None:
            return None
        a = np.asarray(a, dtype=float)
        return a[:, None] if a.ndim == 1 else a
    return PanelDataset(units=units, char_z=col(z), char_w=col(w),
                        z_names=["z0"] if z is not None else [],
                        w_names=["w0"] if w is not None else [])


def simulate_logit_panel(n_units, n_periods, rho=0.4, alpha=0.0, sigma=1.0, seed=0):
    """Homogeneous location-shift AR(1) with logistic shocks.

    Satisfies the heterogeneous-DR model exactly: Pr(y_t <= y | y_{t-1}) =
    Lambda((y - alpha - rho y_{t-1}) / sigma).
    """
    rng = np.random.default_rng(seed)
    y = np.zeros((n_units, n_periods + 1))
    y[:, 0] = rng.logistic(size=n_units) * sigma + alpha
    for t in range(1, n_periods + 1):
        y[:, t] = alpha + rho * y[:, t - 1] + sigma * rng.logistic(size=n_units)
    return make_panel(y)


@pytest.fixture
def small_design():
    ds = simulate_logit_panel(4, 30, seed=11)
    return build_regressors(ds, lags=1)
