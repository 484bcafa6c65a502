"""Estimation and inference for high-dimensional multi-response growth curve models.

Responses are stored as arrays of shape (subjects, regions, visits). The
covariance of each region is ``G_i Sigma_zeta G_i' + [Sigma_R]_rr Sigma_T``
per subject, estimated by a moment-based multi-step procedure; coefficients
are fitted region by region with generalized least squares and tested with a
max-type global test and an FDR-controlling multiple test.
"""
import logging

__version__ = "0.1.0"

from .covariance import estimate_all, psd_repair
from .errors import (
    DimensionError,
    EstimationError,
    GCMError,
    IngestError,
    NumericalError,
    RankDeficientError,
)
from .inference import FitResult, global_test, gls_fit, multiple_test, test_statistics
from .model import (
    CoefficientMatrix,
    CovarianceComponents,
    DesignMatrix,
    GrowthBasis,
    GrowthCurveDataset,
    build_design,
    build_growth_basis,
    center_responses,
)
from .simulation import SimulationConfig, make_truth, replication_rng, sample_dataset

logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "__version__",
    "GrowthCurveDataset",
    "DesignMatrix",
    "GrowthBasis",
    "CovarianceComponents",
    "CoefficientMatrix",
    "build_design",
    "build_growth_basis",
    "center_responses",
    "estimate_all",
    "psd_repair",
    "gls_fit",
    "test_statistics",
    "global_test",
    "multiple_test",
    "FitResult",
    "SimulationConfig",
    "make_truth",
    "sample_dataset",
    "replication_rng",
    "GCMError",
    "DimensionError",
    "RankDeficientError",
    "NumericalError",
    "EstimationError",
    "IngestError",
]
