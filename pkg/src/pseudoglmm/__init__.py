"""Mixed-effects logistic regression from per-cluster moment summaries.

Data providers reduce each cluster to sample central moments
(:mod:`pseudoglmm.moments`), the analyst regenerates moment-matched
pseudo-data (:mod:`pseudoglmm.pseudogen`) and fits fixed-effects or
random-intercept logistic models on it (:mod:`pseudoglmm.glmm`).
"""

from pseudoglmm.errors import (
    BundleValidationError,
    ClusterTooSmallError,
    ConfigurationError,
    DegenerateScaleError,
    IncompatibleProvidersError,
    InvalidInputError,
    InvalidStartError,
    PseudoglmmError,
)
from pseudoglmm.moments import (
    ClusterData,
    MomentSpec,
    SummaryBundle,
    VariableMeta,
    central_moment,
    encode_dummies,
    enumerate_moment_spec,
    joint_central_moment,
    standardize,
    summarize_cluster,
)

__version__ = "0.1.0"

__all__ = [
    "BundleValidationError",
    "ClusterData",
    "ClusterTooSmallError",
    "ConfigurationError",
    "DegenerateScaleError",
    "IncompatibleProvidersError",
    "InvalidInputError",
    "InvalidStartError",
    "MomentSpec",
    "PseudoglmmError",
    "SummaryBundle",
    "VariableMeta",
    "central_moment",
    "encode_dummies",
    "enumerate_moment_spec",
    "joint_central_moment",
    "standardize",
    "summarize_cluster",
]
