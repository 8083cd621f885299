"""Reduced-rank spatio-temporal modeling of air-pollution monitoring data.

Log concentrations are modeled as land-use regression coefficients on
smooth temporal basis functions, with spatially structured coefficient
fields and an exponential-covariance space-time residual. The likelihood
and predictions exploit the block structure of the marginal covariance so
the dense N x N matrix is never formed.
"""

__version__ = "1.0.0"

from .basis import BasisKind, RangeMode, SpatialBasis, SpatialBasisSpec
from .covariance import CovParams, ExpCovParams
from .fit import FittedModel, ModelSpec, OptimizerOptions, fit, load_model, save_model
from .geometry import KnotSet, KnotSource, SiteKind, SiteTable, select_knots
from .likelihood import build_layout, profile_loglik
from .predict import PredictionRequest, PredictionResult, predict
from .temporal import ObservationSet, TemporalBasis, estimate_temporal_basis

__all__ = [
    "BasisKind", "RangeMode", "SpatialBasis", "SpatialBasisSpec",
    "CovParams", "ExpCovParams",
    "FittedModel", "ModelSpec", "OptimizerOptions", "fit",
    "load_model", "save_model",
    "KnotSet", "KnotSource", "SiteKind", "SiteTable", "select_knots",
    "build_layout", "profile_loglik",
    "PredictionRequest", "PredictionResult", "predict",
    "ObservationSet", "TemporalBasis", "estimate_temporal_basis",
]
