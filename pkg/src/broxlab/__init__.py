"""broxlab: simulation and statistical verification lab for one-dimensional
diffusion in a Brownian environment.

The package builds the diffusion from sampled environments through the exact
scale / time-change representation, computes local times and occupation
measures, decomposes environments into valleys, and runs seeded Monte-Carlo
experiments that verify the distributional identities the construction rests
on.
"""

from .environment import (
    Environment,
    GammaReport,
    LadderSequence,
    Thresholds,
    ValleyDecomposition,
    a_point,
    decompose,
    exp_integral,
    four_integrals,
    gamma_events,
    ladder_sequence,
    localization_sets,
    plus_valley,
    thresholds_from_constants,
    valley_sequence,
)
from .diffusion import DiffusionRealization, LocalTimeField, ProfileFlags, profile_events, scale, scale_inverse
from .errors import (
    BroxlabError,
    DomainError,
    HorizonError,
    InsufficientDataError,
    InvalidConfigError,
)
from .experiments import ExperimentConfig, ExperimentReport, run_experiment, validate_config
from .laws import TestResult, j0_constant, ks_test, law_cdf, make_cdf, tail_frequency
from .paths import (
    SamplePath,
    SamplerConfig,
    bessel_functionals,
    hitting_time,
    oscillation_first_exceed,
    read_csv,
    reflect,
    sample_bessel,
    sample_brownian,
    write_csv,
)

__version__ = "0.1.0"
