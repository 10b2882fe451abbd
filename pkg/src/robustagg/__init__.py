"""Robust aggregation of local M-estimators for distributed data.

Local servers fit their shards and transmit estimates with sandwich
variances; the central processor aggregates them through clipped, whitened
estimating equations, combines the variance matrices by a weighted spatial
median, and screens the transmissions for contamination.
"""

from .aggregate import (
    AggregationResult,
    HuberConfig,
    LocalEstimate,
    huber_aggregate,
    huber_psi,
    standard_errors,
    tau_c,
    weighted_average,
)
from .detect import DetectionReport, ServerDetection, detect, mahalanobis_d1, mahalanobis_d2
from .distsim import (
    ContaminationKind,
    ContaminationSpec,
    ReplicateRecord,
    StudyConfig,
    StudyMetrics,
    contaminate,
    decode_message,
    encode_message,
    generate_dataset,
    partition,
    run_replicate,
    run_study,
)
from .models import (
    LocalFit,
    ModelKind,
    ModelSpec,
    Observations,
    criterion_eval,
    fit_local,
    sandwich_variance,
)
from .numkit import (
    EigDecomp,
    chi2_quantile,
    inv_sqrt_pd,
    pd_project,
    std_normal,
    sym_eig,
    vech,
    vech_inv,
)
from .spatialmed import SpatialMedianResult, WeightedPoint, aggregate_sigma, spatial_median

__version__ = "0.1.0"
