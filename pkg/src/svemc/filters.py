"""Particle filter and delta (coupled fine/coarse) particle filter.

Both filters carry full increment histories because every weight evaluation
needs the complete past through the Volterra convolution; resampling copies
histories row-wise.  Per-step flow, with T the number of unit-time
observations:

    extend block 1; for t = 1..T-1: weight, update z, resample, extend
    block t+1; at t = T: weight, update z, select one trajectory.

Weights are handled in log space; the running normalizing-constant estimate
accumulates the log mean unnormalized weight at each t.  Resampling is
multinomial at every step (inverse-CDF draws).  A single generator drives one
filter run, so output is deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import (
    IncrementPath,
    Level,
    _euler_extend,
    coarsen,
    coarsen_values,
    kernel_grid,
)
from .errors import DegenerateWeightError, FilterCollapseError, LevelUnderflowError
from .models import ModelKind, ModelParams, ObservationSeries, g_ssm_log, kappa_sv_log

#: Hook signature: (level, t, V, w) -> per-particle log weights, where V and w
#: are that level's (N, G+1) volatility and (N, G) increment arrays.
LogWeightFn = Callable[[Level, int, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CoupledPath:
    """A fine trajectory and its pairwise-summed coarse counterpart."""

    fine: IncrementPath
    coarse: IncrementPath


@dataclass(frozen=True)
class FilterOutput:
    trajectory: IncrementPath | CoupledPath
    log_z: float

    @property
    def z_hat(self) -> float:
        return float(np.exp(self.log_z))


@dataclass
class ParticleCloud:
    """Mutable per-level filter state: increment histories, the cached Euler
    summands, and the volatility grid, filled up to `filled` grid columns."""

    level: Level
    horizon: int
    n: int
    w: np.ndarray
    a: np.ndarray
    V: np.ndarray
    kernel_rev: np.ndarray
    theta: ModelParams
    filled: int = 0

    @classmethod
    def allocate(cls, theta: ModelParams, level: Level, horizon: int, n: int) -> "ParticleCloud":
        G = horizon * level.steps_per_unit()
        V = np.empty((n, G + 1))
        V[:, 0] = theta.vol.V0
        kern = np.ascontiguousarray(kernel_grid(theta.kernel, level, G)[::-1])
        return cls(
            level=level,
            horizon=horizon,
            n=n,
            w=np.empty((n, G)),
            a=np.empty((n, G)),
            V=V,
            kernel_rev=kern,
            theta=theta,
        )

    def extend(self, block: np.ndarray) -> None:
        """Append one unit-time block of increments and advance V."""
        m = self.level.steps_per_unit()
        lo, hi = self.filled, self.filled + m
        self.w[:, lo:hi] = block
        vol = self.theta.vol
        _euler_extend(
            self.V, self.a, self.w, self.kernel_rev,
            vol.V0, vol.kappa, vol.lam, vol.nu, self.level.step(), lo, hi,
        )
        self.filled = hi

    def gather(self, idx: np.ndarray) -> None:
        self.w = self.w[idx]
        self.a = self.a[idx]
        self.V = self.V[idx]

    def trajectory(self, i: int) -> IncrementPath:
        return IncrementPath(level=self.level, horizon=self.horizon, values=self.w[i].copy())


def multinomial_resample(weights, items, n: int, rng: np.random.Generator):
    """n categorical draws with replacement from ``items`` by ``weights``."""
    probs = np.asarray(weights, dtype=float)
    if np.any(probs < 0):
        raise ValueError("resampling weights must be non-negative")
    total = probs.sum()
    if total == 0.0:
        raise DegenerateWeightError("all resampling weights are zero")
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"resampling weights must sum to 1 within 1e-9, got {total}")
    idx = _resample_indices(probs / total, n, rng)
    if isinstance(items, np.ndarray):
        return items[idx]
    return [items[i] for i in idx]


def _resample_indices(probs: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="left")


def _normalize_log_weights(lw: np.ndarray, t: int) -> tuple[np.ndarray, float]:
    """Return (normalized weights, log mean unnormalized weight) or raise
    FilterCollapseError when every weight has vanished."""
    lw = np.where(np.isnan(lw), -np.inf, lw)
    peak = np.max(lw)
    if not np.isfinite(peak):
        raise FilterCollapseError(t)
    shifted = np.exp(lw - peak)
    total = shifted.sum()
    log_mean = peak + np.log(total) - np.log(lw.size)
    probs = shifted / total
    return probs, float(log_mean)


def make_log_weight_fn(theta: ModelParams, y: ObservationSeries) -> LogWeightFn:
    """Observation log-density per particle and unit time for the model."""
    if theta.model_kind is ModelKind.STATE_SPACE:

        def fn(level: Level, t: int, V: np.ndarray, w: np.ndarray) -> np.ndarray:
            m = level.steps_per_unit()
            return g_ssm_log(theta, V[:, t * m], float(y.y[t - 1]))

    else:

        def fn(level: Level, t: int, V: np.ndarray, w: np.ndarray) -> np.ndarray:
            m = level.steps_per_unit()
            seg = slice((t - 1) * m, t * m)
            return kappa_sv_log(
                theta, level, V[:, seg], w[:, seg], y.previous(t), float(y.y[t - 1])
            )

    return fn


def particle_filter(
    y: ObservationSeries,
    level: Level,
    N: int,
    theta: ModelParams,
    rng: np.random.Generator,
    trace: Callable[[dict], None] | None = None,
    log_weight_fn: LogWeightFn | None = None,
) -> FilterOutput:
    """Single-level particle filter returning one sampled trajectory and the
    normalizing-constant estimate."""
    if N < 1:
        raise ValueError("particle count must be at least 1")
    T = y.T
    m = level.steps_per_unit()
    sd = np.sqrt(level.step())
    weight_fn = log_weight_fn or make_log_weight_fn(theta, y)

    cloud = ParticleCloud.allocate(theta, level, T, N)
    cloud.extend(rng.standard_normal((N, m)) * sd)
    log_z = 0.0
    for t in range(1, T + 1):
        lw = np.asarray(weight_fn(level, t, cloud.V, cloud.w), dtype=float)
        probs, log_mean = _normalize_log_weights(lw, t)
        log_z += log_mean
        info = None
        if trace is not None:
            info = {"t": t, "probs": probs, "log_z": log_z, "lw": lw, "cloud": cloud}
        if t < T:
            idx = _resample_indices(probs, N, rng)
            if info is not None:
                info["resample_idx"] = idx
                trace(info)
            cloud.gather(idx)
            cloud.extend(rng.standard_normal((N, m)) * sd)
        else:
            sel = int(_resample_indices(probs, 1, rng)[0])
            if info is not None:
                info["selected"] = sel
                trace(info)
    return FilterOutput(trajectory=cloud.trajectory(sel), log_z=log_z)


def delta_particle_filter(
    y: ObservationSeries,
    level: Level,
    N: int,
    theta: ModelParams,
    rng: np.random.Generator,
    trace: Callable[[dict], None] | None = None,
    log_weight_fn: LogWeightFn | None = None,
) -> FilterOutput:
    """Coupled fine/coarse particle filter whose weights are the per-t maxima
    of the two level densities.  Coarse increments are pairwise sums of the
    fine ones, and resampling moves pairs jointly."""
    if level.l < 1:
        raise LevelUnderflowError("delta particle filter needs level >= 1")
    if N < 1:
        raise ValueError("particle count must be at least 1")
    T = y.T
    m = level.steps_per_unit()
    sd = np.sqrt(level.step())
    coarse_level = level.coarser()
    weight_fn = log_weight_fn or make_log_weight_fn(theta, y)

    fine = ParticleCloud.allocate(theta, level, T, N)
    coarse = ParticleCloud.allocate(theta, coarse_level, T, N)

    def extend_pair():
        block = rng.standard_normal((N, m)) * sd
        fine.extend(block)
        coarse.extend(coarsen_values(block))

    extend_pair()
    log_z = 0.0
    for t in range(1, T + 1):
        lw_f = np.asarray(weight_fn(level, t, fine.V, fine.w), dtype=float)
        lw_c = np.asarray(weight_fn(coarse_level, t, coarse.V, coarse.w), dtype=float)
        lw = np.maximum(lw_f, lw_c)
        probs, log_mean = _normalize_log_weights(lw, t)
        log_z += log_mean
        info = None
        if trace is not None:
            info = {
                "t": t, "probs": probs, "log_z": log_z,
                "lw": lw, "lw_fine": lw_f, "lw_coarse": lw_c,
                "fine": fine, "coarse": coarse,
            }
        if t < T:
            idx = _resample_indices(probs, N, rng)
            if info is not None:
                info["resample_idx"] = idx
                trace(info)
            fine.gather(idx)
            coarse.gather(idx)
            extend_pair()
        else:
            sel = int(_resample_indices(probs, 1, rng)[0])
            if info is not None:
                info["selected"] = sel
                trace(info)
    pair = CoupledPath(fine=fine.trajectory(sel), coarse=coarse.trajectory(sel))
    return FilterOutput(trajectory=pair, log_z=log_z)


def check_coupled(path: CoupledPath) -> bool:
    """True when the coarse member equals the coarsened fine member."""
    return np.array_equal(coarsen(path.fine).values, path.coarse.values)
