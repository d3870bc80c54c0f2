"""Model parameters, priors, constrained/unconstrained transforms, and the
per-unit-time observation densities for the state-space and stochastic
volatility models.

The stochastic volatility observation density for unit interval (t-1, t] is

    psi( y_t ; y_{t-1} + r + rho * sum_k sqrt(|v_k|) * w_k ,
               (1 - rho^2) * dt * sum_k |v_k| )

where (v_k, w_k) run over the 2**l grid cells of [t-1, t), v_k being the
left-endpoint volatility value and w_k the Brownian increment of the cell.
The state-space model instead weights by a Gaussian density of y_t centered
at the end-of-interval volatility V_t with fixed observation variance.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .core import KernelParams, Level, VolParams
from .errors import DegenerateVarianceError

LOG_2PI = math.log(2.0 * math.pi)

#: Canonical field order used by every serialized parameter record.
PARAM_NAMES = ("V0", "kappa", "lambda", "nu", "H", "C", "rho", "r", "sigma_obs")


class ModelKind(str, enum.Enum):
    STATE_SPACE = "ssm"
    STOCH_VOL = "sv"


@dataclass(frozen=True)
class ModelParams:
    """Full parameter vector; fields inactive under `model_kind` are carried
    but ignored by the likelihood."""

    vol: VolParams
    kernel: KernelParams
    rho: float = 0.0
    r: float = 0.0
    sigma_obs: float = 0.8
    model_kind: ModelKind = ModelKind.STOCH_VOL
    estimate_H: bool = False
    include_drift: bool = True

    def __post_init__(self):
        if not abs(self.rho) <= 1.0:
            raise ValueError(f"rho must lie in [-1, 1], got {self.rho}")
        if not self.sigma_obs > 0:
            raise ValueError(f"sigma_obs must be positive, got {self.sigma_obs}")
        if not np.isfinite(self.r):
            raise ValueError(f"r must be finite, got {self.r}")


@dataclass(frozen=True)
class ObservationSeries:
    """Unit-time observations y_1..y_T with the given initial value y0.

    For the stochastic volatility model the entries are log-price levels and
    the likelihood depends on consecutive differences (the log returns); for
    the state-space model the entries are direct noisy volatility readings
    and y0 is unused.
    """

    y: np.ndarray
    y0: float = 0.0

    def __post_init__(self):
        arr = np.asarray(self.y, dtype=float)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("observation series must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(arr)) or not np.isfinite(self.y0):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "y", arr)

    @property
    def T(self) -> int:
        return self.y.size

    def previous(self, t: int) -> float:
        """y_{t-1} with the t = 1 case falling back to y0."""
        return self.y0 if t == 1 else float(self.y[t - 2])


def active_names(model_kind: ModelKind, estimate_H: bool) -> tuple[str, ...]:
    """Names of the sampled parameters, in unconstrained-vector order."""
    if model_kind is ModelKind.STATE_SPACE:
        names = ["V0", "kappa", "lambda", "nu"]
    else:
        names = ["V0", "rho", "kappa", "lambda", "nu", "r"]
    if estimate_H:
        names.append("H")
    return tuple(names)


def params_to_record(theta: ModelParams) -> dict[str, float]:
    """Flat named-field record used by config echo and output files."""
    return {
        "V0": theta.vol.V0,
        "kappa": theta.vol.kappa,
        "lambda": theta.vol.lam,
        "nu": theta.vol.nu,
        "H": theta.kernel.H,
        "C": theta.kernel.C,
        "rho": theta.rho,
        "r": theta.r,
        "sigma_obs": theta.sigma_obs,
    }


def params_from_record(
    record: dict[str, float],
    model_kind: ModelKind,
    estimate_H: bool = False,
    include_drift: bool = True,
) -> ModelParams:
    return ModelParams(
        vol=VolParams(
            V0=record["V0"], kappa=record["kappa"], lam=record["lambda"], nu=record["nu"]
        ),
        kernel=KernelParams(C=record["C"], H=record["H"]),
        rho=record.get("rho", 0.0),
        r=record.get("r", 0.0),
        sigma_obs=record.get("sigma_obs", 0.8),
        model_kind=model_kind,
        estimate_H=estimate_H,
        include_drift=include_drift,
    )


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------


def gaussian_logpdf(x, mean, var):
    """Log of the one-dimensional Gaussian density. Vectorizes elementwise."""
    var_arr = np.asarray(var, dtype=float)
    if np.any(np.isnan(var_arr)) or np.any(var_arr <= 0):
        raise ValueError(f"variance must be positive, got {var}")
    out = -0.5 * (LOG_2PI + np.log(var_arr)) - np.square(np.asarray(x) - mean) / (2.0 * var_arr)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _sanitized_logpdf(x, mean, var):
    """Gaussian log-density where non-finite moments map to -inf weight.

    Exploding Euler paths produce inf/nan means or variances; those paths
    are impossible under the model, not errors.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.asarray(var, dtype=float)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        out = -0.5 * (LOG_2PI + np.log(var)) - np.square(x - mean) / (2.0 * var)
    return np.where(np.isfinite(out), out, -np.inf)


def kappa_sv_log(
    theta: ModelParams,
    level: Level,
    v_seg: np.ndarray,
    w_seg: np.ndarray,
    y_prev: float,
    y_t: float,
):
    """Log observation density of the discretized SV model for one unit
    interval.  ``v_seg``/``w_seg`` hold the 2**l cell values; a leading axis
    vectorizes over particles."""
    av = np.abs(np.asarray(v_seg, dtype=float))
    drift = theta.r if theta.include_drift else 0.0
    with np.errstate(invalid="ignore", over="ignore"):
        mean = y_prev + drift + theta.rho * np.sum(np.sqrt(av) * w_seg, axis=-1)
        var = (1.0 - theta.rho**2) * level.step() * np.sum(av, axis=-1)
    if np.any(np.asarray(var) == 0.0):
        raise DegenerateVarianceError(
            "kappa variance is exactly zero (|rho| = 1 or an all-zero volatility segment)"
        )
    out = _sanitized_logpdf(y_t, mean, var)
    if np.ndim(out) == 0:
        return float(out)
    return out


def kappa_sv(
    theta: ModelParams,
    level: Level,
    v_seg: np.ndarray,
    w_seg: np.ndarray,
    y_prev: float,
    y_t: float,
) -> float:
    """Density-scale version of `kappa_sv_log` for a single segment."""
    return float(np.exp(kappa_sv_log(theta, level, v_seg, w_seg, y_prev, y_t)))


def g_ssm_log(theta: ModelParams, v_t, y_t):
    """Log Gaussian density of a state-space observation given V_t."""
    out = _sanitized_logpdf(y_t, v_t, theta.sigma_obs**2)
    if np.ndim(out) == 0:
        return float(out)
    return out


def g_ssm(theta: ModelParams, v_t: float, y_t: float) -> float:
    return float(np.exp(g_ssm_log(theta, v_t, y_t)))


# ---------------------------------------------------------------------------
# Transforms between the constrained and unconstrained parameterizations
# ---------------------------------------------------------------------------


def _to_unconstrained(name: str, value: float) -> float:
    if name in ("V0", "kappa", "lambda", "nu"):
        if value <= 0:
            raise ValueError(f"{name} must be positive to transform, got {value}")
        return math.log(value)
    if name == "rho":
        if abs(value) >= 1.0:
            raise ValueError(f"rho on the boundary maps to +-inf and is rejected, got {value}")
        return math.log((1.0 + value) / (1.0 - value))
    if name == "r":
        return value
    if name == "H":
        if not 0.0 < value < 0.5:
            raise ValueError(f"H on the boundary maps to +-inf and is rejected, got {value}")
        return math.log(2.0 * value / (1.0 - 2.0 * value))
    raise KeyError(name)


def _from_unconstrained(name: str, z: float) -> float:
    if name in ("V0", "kappa", "lambda", "nu"):
        return math.exp(z)
    if name == "rho":
        return math.tanh(0.5 * z)
    if name == "r":
        return z
    if name == "H":
        return 0.5 / (1.0 + math.exp(-z))
    raise KeyError(name)


def transform(theta: ModelParams) -> np.ndarray:
    """Map the active parameters to the unconstrained vector z."""
    record = params_to_record(theta)
    names = active_names(theta.model_kind, theta.estimate_H)
    return np.array([_to_unconstrained(n, record[n]) for n in names])


def untransform(
    z: np.ndarray,
    model_kind: ModelKind,
    estimate_H: bool,
    template: ModelParams,
) -> ModelParams:
    """Inverse of `transform`; inactive fields are copied from ``template``."""
    names = active_names(model_kind, estimate_H)
    z = np.asarray(z, dtype=float)
    if z.shape != (len(names),):
        raise ValueError(f"expected {len(names)} unconstrained coordinates, got shape {z.shape}")
    record = params_to_record(template)
    for name, zi in zip(names, z):
        record[name] = _from_unconstrained(name, float(zi))
    return params_from_record(
        record,
        model_kind,
        estimate_H=estimate_H,
        include_drift=template.include_drift,
    )


def prior_logpdf_z(z: np.ndarray) -> float:
    """Log prior density in the unconstrained space: independent standard
    normals on every active coordinate (priors are declared on that scale,
    so the transform Jacobian is already absorbed)."""
    z = np.asarray(z, dtype=float)
    return float(-0.5 * np.sum(z * z) - 0.5 * LOG_2PI * z.size)


def prior_logpdf(theta: ModelParams) -> float:
    """Unconstrained-space prior log-density of a constrained parameter
    vector; -inf outside the support."""
    try:
        z = transform(theta)
    except ValueError:
        return -np.inf
    return prior_logpdf_z(z)


def prior_sample(
    model_kind: ModelKind,
    estimate_H: bool,
    rng: np.random.Generator,
    template: ModelParams,
) -> ModelParams:
    """Draw from the prior by inverting the transforms of standard normals."""
    d = len(active_names(model_kind, estimate_H))
    return untransform(rng.standard_normal(d), model_kind, estimate_H, template)


def with_model_kind(theta: ModelParams, model_kind: ModelKind) -> ModelParams:
    return replace(theta, model_kind=model_kind)
