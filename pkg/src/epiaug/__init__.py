"""Bayesian data augmentation for partially observed stochastic epidemics.

Fits SIR, SEIR, and SIRS models to prevalence count data by alternating
subject-level path proposals with conjugate parameter updates, and provides
exact-simulation, approximate-simulation, and particle-MCMC baselines.
"""

from .diagnostics import effective_sample_size, summarize_latent
from .engine import (
    ChainOutput,
    RunConfig,
    initialize_paths,
    run_chain,
    run_chains,
)
from .gibbs import BetaPrior, GammaPrior, PriorSet
from .models import (
    SIR,
    SEIR,
    SIRS,
    Dataset,
    EmissionSpec,
    ModelSpec,
    ParameterVector,
    PopulationHistory,
    complete_data_loglik,
    emission_loglik,
    get_model,
    sufficient_statistics,
)
from .pmmh import PmmhConfig, adaptive_rwmh_chain, bootstrap_loglik
from .simulate import (
    EpochSchedule,
    disaggregate,
    gillespie_simulate,
    lump,
    sample_observations,
    tau_leap_simulate,
)

__version__ = "0.1.0"
