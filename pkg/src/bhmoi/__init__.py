"""Overlap-index clustering and dynamic borrowing for Bayesian hierarchical models."""

__version__ = "0.1.0"

from .clustering import (
    ClusteringConfig,
    ClusteringResult,
    ClusterPartition,
    WeightMode,
    brute_force_best_partition,
    obi_score,
    oci_score,
    optimal_partition,
    weighted_kmeans,
    wkm_objective,
)
from .density import (
    GriddedDensity,
    SampleSet,
    SupportGrid,
    build_common_grid,
    density_from_samples,
    mixture_mean,
    ovl,
    total_variation,
)
from .engine import (
    BhmoiResult,
    BinaryTrialData,
    HierPriorConfig,
    McmcConfig,
    NormalTrialData,
    PosteriorDraws,
    SlopeFunction,
    borrowing_alpha,
    fit_cluster_bhm_binary,
    fit_cluster_bhm_normal,
    noninformative_posteriors_binary,
    run_bhmoi_binary,
    slope_k_alpha,
)
