"""Dyadic time grids, the power kernel, Brownian increments, and the
Euler-Maruyama recursion for the Volterra volatility process.

Conventions
-----------
A level ``l`` has stepsize ``dt = 2**-l``.  Over a horizon of ``T`` time units
the grid has ``G = T * 2**l`` steps.  Increment ``k`` (0-based) covers the
interval ``(k*dt, (k+1)*dt]``.  Volatility values live on the ``G + 1`` grid
times ``0, dt, ..., T``.

The recursion evaluated here is

    V[k+1] = V0 + sum_{j=0..k} K((k+1-j)*dt) * ((kappa - lam*V[j])*dt
                                                + nu*sqrt(|V[j]|)*w[j])

with ``K(t) = C * t**H``.  The convolution is summed directly, so one path
costs Theta(G^2) multiply-adds.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import LevelUnderflowError


@dataclass(frozen=True)
class Level:
    """Dyadic discretization index; stepsize 2**-l."""

    l: int

    def __post_init__(self):
        if not isinstance(self.l, (int, np.integer)) or self.l < 0:
            raise ValueError(f"level index must be a non-negative integer, got {self.l!r}")

    def step(self) -> float:
        return 2.0 ** (-self.l)

    def steps_per_unit(self) -> int:
        return 2 ** self.l

    def coarser(self) -> "Level":
        if self.l == 0:
            raise LevelUnderflowError("level 0 has no coarser level")
        return Level(self.l - 1)


@dataclass(frozen=True)
class KernelParams:
    """Power kernel K(t) = C * t**H with C > 0 and H in [0, 1/2)."""

    C: float
    H: float

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError(f"kernel scale C must be positive, got {self.C}")
        if not (0.0 <= self.H < 0.5):
            raise ValueError("H must lie in [0, 0.5)")


@dataclass(frozen=True)
class VolParams:
    """Volatility equation coefficients, all strictly positive."""

    V0: float
    kappa: float
    lam: float
    nu: float

    def __post_init__(self):
        for name in ("V0", "kappa", "lam", "nu"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite real, got {value}")


@dataclass(frozen=True)
class IncrementPath:
    """Brownian increments on the level grid over [0, horizon]."""

    level: Level
    horizon: int
    values: np.ndarray

    def __post_init__(self):
        expected = self.horizon * self.level.steps_per_unit()
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if self.values.shape != (expected,):
            raise ValueError(
                f"increment path at level {self.level.l} over horizon {self.horizon} "
                f"must have {expected} entries, got shape {self.values.shape}"
            )


@dataclass(frozen=True)
class VolatilityPath:
    """Discretized V on grid times 0, dt, ..., horizon."""

    level: Level
    horizon: int
    values: np.ndarray

    def __post_init__(self):
        expected = self.horizon * self.level.steps_per_unit() + 1
        if self.values.shape != (expected,):
            raise ValueError(
                f"volatility path at level {self.level.l} over horizon {self.horizon} "
                f"must have {expected} entries, got shape {self.values.shape}"
            )

    def unit_time_skeleton(self) -> np.ndarray:
        """V at integer times 1..horizon."""
        m = self.level.steps_per_unit()
        return self.values[m::m]


def kernel_eval(kp: KernelParams, t: float) -> float:
    """K(t) = C * t**H; K(0) = 0 for H > 0 (and C for H = 0)."""
    if t < 0:
        raise ValueError(f"kernel argument must be non-negative, got {t}")
    return kp.C * t ** kp.H


@lru_cache(maxsize=64)
def _kernel_grid_cached(C: float, H: float, dt: float, n: int) -> np.ndarray:
    lags = np.arange(1, n + 1, dtype=float) * dt
    grid = C * lags ** H
    grid.setflags(write=False)
    return grid


def kernel_grid(kp: KernelParams, level: Level, n_steps: int) -> np.ndarray:
    """K(j*dt) for j = 1..n_steps, cached per (kernel, level, length).

    Returned array is read-only; it is shared across callers.
    """
    return _kernel_grid_cached(kp.C, kp.H, level.step(), n_steps)


def sample_increments(level: Level, horizon: int, rng: np.random.Generator) -> IncrementPath:
    """Draw i.i.d. N(0, dt) increments covering [0, horizon]."""
    if horizon < 1:
        raise ValueError("horizon must be a positive integer")
    n = horizon * level.steps_per_unit()
    values = rng.standard_normal(n) * np.sqrt(level.step())
    return IncrementPath(level=level, horizon=horizon, values=values)


def coarsen(fine: IncrementPath) -> IncrementPath:
    """Pairwise-sum a level-l path down to level l-1.

    Output entry k is ``fine[2k] + fine[2k+1]``, the two fine increments
    inside coarse step k, so the total sum is preserved exactly up to
    floating-point addition.
    """
    if fine.level.l < 1:
        raise LevelUnderflowError("cannot coarsen a level-0 increment path")
    values = coarsen_values(fine.values)
    return IncrementPath(level=fine.level.coarser(), horizon=fine.horizon, values=values)


def coarsen_values(values: np.ndarray) -> np.ndarray:
    """Pairwise sums along the last axis (vectorized form of `coarsen`)."""
    return values[..., 0::2] + values[..., 1::2]


def _euler_extend(
    V: np.ndarray,
    A: np.ndarray,
    W: np.ndarray,
    kernel_rev: np.ndarray,
    v0,
    kappa,
    lam,
    nu,
    dt: float,
    start: int,
    stop: int,
) -> None:
    """Advance the Euler recursion in place over grid steps [start, stop).

    V is (B, G+1) with columns 0..start already filled, A is the (B, G)
    cache of per-step summands, W the (B, G) increments.  ``kernel_rev`` is
    the length-G kernel grid reversed, so ``kernel_rev[G-1-k:]`` lines up lag
    k+1 with increment 0.  Coefficients may be scalars or length-B arrays.
    """
    G = W.shape[1]
    with np.errstate(invalid="ignore", over="ignore"):
        for k in range(start, stop):
            vk = V[:, k]
            A[:, k] = (kappa - lam * vk) * dt + nu * np.sqrt(np.abs(vk)) * W[:, k]
            V[:, k + 1] = v0 + A[:, : k + 1] @ kernel_rev[G - 1 - k :]


def euler_paths(
    vp: VolParams | tuple,
    kp: KernelParams,
    W: np.ndarray,
    level: Level,
    horizon: int,
) -> np.ndarray:
    """Batched Euler recursion: rows of W are independent increment paths.

    ``vp`` is either a single VolParams shared by all rows or a tuple of
    per-row coefficient arrays (V0, kappa, lam, nu).  Returns the (B, G+1)
    matrix of volatility paths.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    G = horizon * level.steps_per_unit()
    if W.shape[1] != G:
        raise ValueError(f"expected {G} increments per row, got {W.shape[1]}")
    if isinstance(vp, VolParams):
        v0, kappa, lam, nu = vp.V0, vp.kappa, vp.lam, vp.nu
    else:
        v0, kappa, lam, nu = vp
    B = W.shape[0]
    V = np.empty((B, G + 1), dtype=float)
    V[:, 0] = v0
    A = np.empty((B, G), dtype=float)
    kernel_rev = np.ascontiguousarray(kernel_grid(kp, level, G)[::-1])
    _euler_extend(V, A, W, kernel_rev, v0, kappa, lam, nu, level.step(), 0, G)
    return V


def euler_volatility_path(vp: VolParams, kp: KernelParams, w: IncrementPath) -> VolatilityPath:
    """Single-path Euler recursion; deterministic in its inputs."""
    V = euler_paths(vp, kp, w.values[None, :], w.level, w.horizon)
    return VolatilityPath(level=w.level, horizon=w.horizon, values=V[0])


def euler_cost_ops(level: Level, horizon: int) -> int:
    """Multiply-add tally of the direct convolution for one path.

    Each grid step k touches k+1 history terms in both the drift and noise
    summands, so the total is G*(G+1) and grows by a factor of about 4 per
    level increment.
    """
    G = horizon * level.steps_per_unit()
    return G * (G + 1)
