"""filterpot: rank CNN filters by extreme-value tail probabilities of their
gradient saliency, with a z-score baseline and a built-in evaluation harness."""

__version__ = "0.1.0"

from .errors import (
    FilterPotError,
    FormatError,
    InsufficientDataError,
    ParameterError,
    ShapeError,
)
from .evt import FitDiagnostics, GpdParams, fit_gpd, gpd_cdf, gpd_log_likelihood, gpd_quantile
from .profiles import (
    FilterMeta,
    FilterStats,
    SaliencyMatrix,
    aggregate_filter_profile,
    compute_stats,
    excesses_for_filter,
    load_profiles,
    save_profiles,
)
from .ranking import (
    FilterRanking,
    TailModel,
    attach_reference,
    fit_tail_model,
    group_attribution,
    load_tail_model,
    normal_tail_probability,
    pot_saliency,
    rank,
    save_tail_model,
    zscore_saliency,
)

__all__ = [
    "FilterPotError",
    "FormatError",
    "InsufficientDataError",
    "ParameterError",
    "ShapeError",
    "FitDiagnostics",
    "GpdParams",
    "fit_gpd",
    "gpd_cdf",
    "gpd_log_likelihood",
    "gpd_quantile",
    "FilterMeta",
    "FilterStats",
    "SaliencyMatrix",
    "aggregate_filter_profile",
    "compute_stats",
    "excesses_for_filter",
    "load_profiles",
    "save_profiles",
    "FilterRanking",
    "TailModel",
    "attach_reference",
    "fit_tail_model",
    "group_attribution",
    "load_tail_model",
    "normal_tail_probability",
    "pot_saliency",
    "rank",
    "save_tail_model",
    "zscore_saliency",
]
