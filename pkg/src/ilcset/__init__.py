"""Bayesian analysis of set-valued data from interlaboratory comparisons.

Infers a consensus subset, a dispersion parameter, per-response outlier
p-values, and laboratory-level random effects from collections of
fixed-size subsets of a finite ground set.
"""

__version__ = "0.1.0"

from .datasets import Dataset, GroupedDataset, ingest, write_csv
from .distributions import (
    BernoulliPair,
    DispersionFamily,
    FamilyKind,
    HammingModel,
    Monotonicity,
    binomial_mode_property,
    binomial_pmf,
    calibrate_pair,
    check_hamming_monotone,
    default_prior,
    dispersion_mean,
    fisher_nch_pmf,
    hamming_log_pmf,
    prior_density_u,
    sample_binomial_subset,
    sample_fisher_subset,
    sample_prior_u,
)
from .errors import (
    BudgetExceededError,
    IlcsetError,
    NonTerminationError,
    NumericalError,
    ValidationError,
)
from .one_stage import (
    PosteriorOneStage,
    SignalReport,
    brute_force_posterior,
    estimate_evidence,
    log_likelihood,
    mcmc_posterior,
    posterior_p_values,
)
from .report import AnalysisConfig, AnalysisReport, check_distribution, run_analysis
from .simulate import simulate_hierarchical, simulate_pooled
from .subsets import (
    AlphaPartitionCounts,
    CompositionVector,
    GroundSet,
    Subset,
    alpha_partition,
    c_n_count,
    count_at_distance,
    enumerate_subsets,
    generate_compositions,
    overlap_outside,
    split_composition,
)
from .two_stage import (
    DTable,
    IntegralCache,
    PosteriorTwoStage,
    TwoStageConfig,
    TwoStageModel,
    bayes_factor,
    build_dtable,
    gamma_statistics,
    group_marginal_log_likelihood,
    load_dtable,
    precompute_d,
    save_dtable,
    two_stage_posterior,
)

__all__ = [name for name in dir() if not name.startswith("_")]
