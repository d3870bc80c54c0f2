"""Particle MCMC and coupled MCMC with Gaussian random-walk proposals in the
unconstrained parameter space.

The acceptance ratio is evaluated in log space with the prior expressed in
the unconstrained parameterization (standard normals there, so transform
Jacobians are already absorbed).  The random-walk proposal is symmetric, so
its q-terms cancel.  A filter collapse while evaluating a proposal counts as
a rejection; a collapse at the initial prior draw triggers a redraw up to a
retry cap.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import Level
from .errors import DegenerateVarianceError, FilterCollapseError
from .filters import (
    CoupledPath,
    FilterOutput,
    IncrementPath,
    delta_particle_filter,
    particle_filter,
)
from .models import (
    ModelParams,
    ObservationSeries,
    active_names,
    prior_logpdf_z,
    prior_sample,
    transform,
    untransform,
)

logger = logging.getLogger(__name__)

#: Proposal evaluation failures treated as Metropolis rejections: filter
#: collapse, degenerate kappa variance, or parameter overflow when mapping
#: back to the constrained space.
_REJECTABLE = (FilterCollapseError, DegenerateVarianceError, ValueError, OverflowError)


@dataclass(frozen=True)
class ProposalConfig:
    """Diagonal random-walk step sizes, one per active unconstrained
    coordinate."""

    step_sizes: np.ndarray

    def __post_init__(self):
        arr = np.atleast_1d(np.asarray(self.step_sizes, dtype=float))
        if arr.ndim != 1 or not np.all(np.isfinite(arr)) or not np.all(arr > 0):
            raise ValueError("all proposal step sizes must be positive finite reals")
        object.__setattr__(self, "step_sizes", arr)

    @classmethod
    def from_scalar(cls, step: float, dim: int) -> "ProposalConfig":
        return cls(step_sizes=np.full(dim, float(step)))


@dataclass(frozen=True)
class ChainRecord:
    theta: ModelParams
    trajectory: IncrementPath | CoupledPath
    log_z: float
    accepted: bool

    @property
    def z_hat(self) -> float:
        return float(np.exp(self.log_z))


@dataclass
class Chain:
    records: list[ChainRecord]
    level: Level
    acceptance_rate: float
    coupled: bool = False
    n_collapsed: int = 0
    series: ObservationSeries | None = None

    def __len__(self) -> int:
        return len(self.records)

    def post_burn_in(self, fraction: float) -> list[ChainRecord]:
        return self.records[burn_in_count(len(self.records), fraction):]


def burn_in_count(n_records: int, fraction: float) -> int:
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"burn-in fraction must lie in [0, 1), got {fraction}")
    return int(math.floor(n_records * fraction))


def rw_propose(
    z: np.ndarray,
    cfg: ProposalConfig,
    rng: np.random.Generator,
    fixed_mask: np.ndarray | None = None,
) -> np.ndarray:
    """z' = z + diag(step_sizes) xi, xi standard normal; symmetric kernel.

    Coordinates flagged in ``fixed_mask`` are copied through unchanged (the
    noise is still drawn so stream consumption does not depend on the mask).
    """
    z = np.asarray(z, dtype=float)
    if cfg.step_sizes.shape != z.shape:
        raise ValueError("step-size vector does not match the parameter dimension")
    zp = z + cfg.step_sizes * rng.standard_normal(z.size)
    if fixed_mask is not None:
        zp = np.where(fixed_mask, z, zp)
    return zp


def log_accept_ratio(
    log_z_prop: float, log_prior_prop: float, log_z_curr: float, log_prior_curr: float
) -> float:
    """Log pseudo-marginal Metropolis ratio for a symmetric proposal."""
    return (log_z_prop + log_prior_prop) - (log_z_curr + log_prior_curr)


def _fixed_mask(template: ModelParams, fixed: Sequence[str]) -> np.ndarray | None:
    if not fixed:
        return None
    names = active_names(template.model_kind, template.estimate_H)
    unknown = set(fixed) - set(names)
    if unknown:
        raise ValueError(f"cannot fix inactive parameters: {sorted(unknown)}")
    return np.array([n in fixed for n in names])


def _run_chain(
    filter_fn: Callable[[ModelParams, np.random.Generator], FilterOutput],
    y: ObservationSeries,
    level: Level,
    M: int,
    cfg: ProposalConfig,
    rng: np.random.Generator,
    template: ModelParams,
    fixed: Sequence[str],
    init_theta: ModelParams | None,
    init_retries: int,
    coupled: bool,
) -> Chain:
    if M < 1:
        raise ValueError("iteration count M must be at least 1")
    fixed_mask = _fixed_mask(template, fixed)
    kind, est_h = template.model_kind, template.estimate_H

    if init_theta is not None:
        theta = init_theta
        out = filter_fn(theta, rng)
    else:
        for attempt in range(init_retries):
            theta = prior_sample(kind, est_h, rng, template)
            try:
                out = filter_fn(theta, rng)
                break
            except (FilterCollapseError, DegenerateVarianceError):
                continue
        else:
            raise FilterCollapseError(
                0, f"initial prior draw collapsed {init_retries} times in a row"
            )

    z = transform(theta)
    log_prior = prior_logpdf_z(z)
    log_z = out.log_z
    trajectory = out.trajectory
    records = [ChainRecord(theta=theta, trajectory=trajectory, log_z=log_z, accepted=True)]

    accepts = 0
    collapses = 0
    for _ in range(M):
        z_prop = rw_propose(z, cfg, rng, fixed_mask)
        log_prior_prop = prior_logpdf_z(z_prop)
        accepted = False
        try:
            theta_prop = untransform(z_prop, kind, est_h, template)
            out_prop = filter_fn(theta_prop, rng)
        except _REJECTABLE as err:
            if isinstance(err, FilterCollapseError):
                collapses += 1
                logger.debug("proposal filter collapse treated as rejection: %s", err)
        else:
            log_a = log_accept_ratio(out_prop.log_z, log_prior_prop, log_z, log_prior)
            if np.log(rng.random()) < log_a:
                accepted = True
                theta, z, log_prior = theta_prop, z_prop, log_prior_prop
                log_z, trajectory = out_prop.log_z, out_prop.trajectory
        accepts += int(accepted)
        records.append(
            ChainRecord(theta=theta, trajectory=trajectory, log_z=log_z, accepted=accepted)
        )
    return Chain(
        records=records,
        level=level,
        acceptance_rate=accepts / M,
        coupled=coupled,
        n_collapsed=collapses,
        series=y,
    )


def pmcmc_chain(
    y: ObservationSeries,
    level: Level,
    N: int,
    M: int,
    cfg: ProposalConfig,
    rng: np.random.Generator,
    template: ModelParams,
    fixed: Sequence[str] = (),
    init_theta: ModelParams | None = None,
    init_retries: int = 100,
) -> Chain:
    """Particle MCMC: Metropolis-Hastings on parameters with the particle
    filter's normalizing-constant estimate standing in for the likelihood."""

    def filter_fn(theta: ModelParams, gen: np.random.Generator) -> FilterOutput:
        return particle_filter(y, level, N, theta, gen)

    return _run_chain(
        filter_fn, y, level, M, cfg, rng, template, fixed, init_theta, init_retries, coupled=False
    )


def coupled_chain(
    y: ObservationSeries,
    level: Level,
    N: int,
    M: int,
    cfg: ProposalConfig,
    rng: np.random.Generator,
    template: ModelParams,
    fixed: Sequence[str] = (),
    init_theta: ModelParams | None = None,
    init_retries: int = 100,
) -> Chain:
    """Coupled MCMC: as `pmcmc_chain` but driven by the delta particle
    filter, storing coupled trajectory pairs."""
    if level.l < 1:
        raise ValueError("coupled chains need level >= 1")

    def filter_fn(theta: ModelParams, gen: np.random.Generator) -> FilterOutput:
        return delta_particle_filter(y, level, N, theta, gen)

    return _run_chain(
        filter_fn, y, level, M, cfg, rng, template, fixed, init_theta, init_retries, coupled=True
    )


def tune_step_sizes(
    y: ObservationSeries,
    level: Level,
    N: int,
    rng: np.random.Generator,
    template: ModelParams,
    coupled: bool = False,
    fixed: Sequence[str] = (),
    target: float = 0.23,
    rounds: int = 8,
    pilot_iters: int = 80,
    initial_step: float = 0.25,
    gain: float = 1.2,
) -> ProposalConfig:
    """Pilot phase: short chains with a log-scale step-size search targeting
    the given acceptance rate; the returned sizes are then frozen for the
    measured run."""
    d = len(active_names(template.model_kind, template.estimate_H))
    runner = coupled_chain if coupled else pmcmc_chain
    log_step = math.log(initial_step)
    theta = None
    for _ in range(rounds):
        cfg = ProposalConfig.from_scalar(math.exp(log_step), d)
        chain = runner(y, level, N, pilot_iters, cfg, rng, template, fixed, init_theta=theta)
        theta = chain.records[-1].theta
        log_step += gain * (chain.acceptance_rate - target)
    return ProposalConfig.from_scalar(math.exp(log_step), d)
