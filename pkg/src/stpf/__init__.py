"""Space-time particle filters for high-dimensional state-space models."""

from stpf.baselines import block_pf_run, bootstrap_pf_run
from stpf.core import FilterConfig, FilterTrace, run
from stpf.estimators import (
    BlockParticleFilter,
    BootstrapParticleFilter,
    MarginalSpaceTimeParticleFilter,
    SpaceTimeParticleFilter,
)
from stpf.harness import ExperimentConfig, aggregate, preset, run_experiment
from stpf.marginal import MutationConfig, run_marginal
from stpf.models import (
    IIDProduct,
    LatticeMixture,
    LinearGaussianChain,
    MarkovSpace,
    PerturbedFactorization,
    make_model,
    simulate_data,
)
from stpf.resampling import DegenerateWeightsError

__version__ = "0.1.0"

__all__ = [
    "BlockParticleFilter",
    "BootstrapParticleFilter",
    "DegenerateWeightsError",
    "ExperimentConfig",
    "FilterConfig",
    "FilterTrace",
    "IIDProduct",
    "LatticeMixture",
    "LinearGaussianChain",
    "MarginalSpaceTimeParticleFilter",
    "MarkovSpace",
    "MutationConfig",
    "PerturbedFactorization",
    "SpaceTimeParticleFilter",
    "aggregate",
    "block_pf_run",
    "bootstrap_pf_run",
    "make_model",
    "preset",
    "run",
    "run_experiment",
    "run_marginal",
    "simulate_data",
]
