"""Monte Carlo inference for partially observed stochastic Volterra
volatility models: Euler discretization, particle filtering, particle MCMC,
and multilevel particle MCMC with coupled-level increments."""

from .core import (
    IncrementPath,
    KernelParams,
    Level,
    VolatilityPath,
    VolParams,
    coarsen,
    euler_volatility_path,
    kernel_eval,
    sample_increments,
)
from .errors import SvemcError
from .filters import (
    CoupledPath,
    FilterOutput,
    delta_particle_filter,
    multinomial_resample,
    particle_filter,
)
from .mcmc import Chain, ChainRecord, ProposalConfig, coupled_chain, pmcmc_chain, rw_propose
from .models import (
    ModelKind,
    ModelParams,
    ObservationSeries,
    g_ssm,
    gaussian_logpdf,
    kappa_sv,
    prior_logpdf,
    prior_sample,
    transform,
    untransform,
)
from .multilevel import (
    LevelAllocation,
    MLEstimate,
    PhiFn,
    choose_levels,
    default_phis,
    h_weights,
    increment_estimator,
    ml_estimate,
    phi_from_expression,
    single_level_estimate,
)
from .experiments import (
    ReturnStats,
    SyntheticDataset,
    generate_synthetic,
    lagged_abs_correlation,
    rate_study,
    return_stats,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
