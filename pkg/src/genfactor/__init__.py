"""Genetic covariance (G-matrix) estimation for high-dimensional traits.

A sparse latent factor animal model fitted by an adaptive Gibbs sampler,
with a half-sib simulation study generator and accuracy statistics.
"""

from .errors import (
    ConfigError,
    DataError,
    GenfactorError,
    InsufficientDataError,
    NumericalError,
    ParameterError,
    PedigreeError,
)
from .evaluate import (
    EvalReport,
    count_large_factors,
    frobenius_error,
    h2_rmse,
    krzanowski,
    match_factors,
    moments_G,
    summarize_reports,
)
from .model import (
    ChainState,
    Hyperparameters,
    Kinship,
    ModelDims,
    PhenotypeData,
    fitness_variance_fraction,
    reconstruct_G,
    reconstruct_P,
    reconstruct_R,
    selection_response,
    trait_heritabilities,
)
from .pedigree import Pedigree, a_matrix_from_pedigree, halfsib_A, halfsib_pedigree
from .rng import (
    RngStream,
    hpd_interval,
    sample_categorical,
    sample_categorical_log,
    sample_gamma,
    sample_matrix_normal,
    sample_wishart,
)
from .sampler import ChainConfig, GibbsSampler, PosteriorSamples, run_chain
from .simulate import GroundTruth, ScenarioSpec, build_scenario, mask_entries, simulate
from .summarize import summarize_posterior, write_summary

__version__ = "0.1.0"
