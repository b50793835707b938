"""Heterogeneous distribution regression for dynamic panels.

Per-unit distribution regression coefficients with incidental-parameter
debiasing, projections on unit characteristics, actual/counterfactual and
stationary outcome distributions, quantile effects, income-mobility
functionals, and uniformly valid cross-sectional bootstrap bands.
"""

__version__ = "0.1.0"

from ._backend import BACKEND
from .bootstrap import (
    BootstrapBand,
    band_conservative,
    band_distribution,
    band_projection,
    band_qe,
    resample_units,
    scale_estimate,
)
from .counterfactual import (
    CharTransform,
    CovariateTransform,
    DistributionEstimate,
    apply_flat_tax,
    apply_progressive_tax,
    counterfactual_coefficients,
    estimate_distribution,
)
from .debias import (
    LongRunVariance,
    UnitSandwich,
    analytical_bias,
    attach_cell_stats,
    debias_analytical,
    debias_jackknife,
    newey_west,
    sandwich_variance,
)
from .drfit import CoefficientField, DrFit, FitOptions, fit_field, fit_unit_threshold
from .links import LinkFunction, get_link
from .markov import (
    MobilitySummary,
    UnitMarkovChain,
    aggregate_mobility,
    build_chain,
    chain_from_unit,
    ergodic,
    mobility,
    recurrence,
    stationary_distribution,
)
from .panel import (
    IdentificationStatus,
    PanelDataset,
    PanelDesign,
    ThresholdGrid,
    UnitSeries,
    build_regressors,
    classify_identification,
    load_panel,
    pooled_threshold_grid,
    quantile_grid_from_values,
)
from .projection import PluginVariances, ProjectionCurve, plugin_variances, project, project_field
from .quantiles import QuantileEffectCurve, left_inverse, quantile_effect, rearranged_inverse

__all__ = [name for name in dir() if not name.startswith("_")]
