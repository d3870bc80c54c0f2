"""Coupling importance weights, the self-normalized level-increment
estimator, level/sample allocation, and the full multilevel estimator.

A coupled chain at level l targets the maximum-coupled measure; the weights

    H1 = prod_t dens_l(fine, t)   / max(dens_l, dens_{l-1})
    H2 = prod_t dens_{l-1}(coar, t) / max(dens_l, dens_{l-1})

turn its samples into separate fine-level and coarse-level posterior
expectations, and the level increment is the difference of the two
self-normalized weighted averages.  All products run in log space.
"""

from __future__ import annotations

import ast
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import IncrementPath, Level, coarsen, euler_paths
from .errors import (
    DegenerateDenominatorError,
    DegenerateWeightError,
    InsufficientDataError,
    SvemcError,
)
from .filters import CoupledPath, FilterOutput, delta_particle_filter
from .mcmc import Chain, ChainRecord, ProposalConfig, coupled_chain, pmcmc_chain, tune_step_sizes
from .models import (
    ModelKind,
    ModelParams,
    ObservationSeries,
    _sanitized_logpdf,
    active_names,
    params_to_record,
    transform,
)
from .seeding import derive_rng


# ---------------------------------------------------------------------------
# Functionals of (theta, V_1..V_T)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PhiFn:
    """Named functional of the parameter vector and the unit-time volatility
    skeleton."""

    name: str
    fn: Callable[[ModelParams, np.ndarray], float]

    def __call__(self, theta: ModelParams, v_skeleton: np.ndarray) -> float:
        return float(self.fn(theta, v_skeleton))


_PHI_LABELS = {
    "V0": "log(V0)",
    "kappa": "log(kappa)",
    "lambda": "log(lambda)",
    "nu": "log(nu)",
    "rho": "log((1+rho)/(1-rho))",
    "r": "r",
    "H": "logit(2H)",
}


def default_phis(model_kind: ModelKind, estimate_H: bool) -> list[PhiFn]:
    """One functional per sampled parameter: its unconstrained coordinate
    (log scale for positives, Fisher-z for rho), matching how estimates are
    reported per parameter."""
    names = active_names(model_kind, estimate_H)
    phis = []
    for i, name in enumerate(names):
        phis.append(
            PhiFn(name=_PHI_LABELS[name], fn=lambda th, v, _i=i: float(transform(th)[_i]))
        )
    return phis


_PHI_FUNCS = {"log": math.log, "exp": math.exp, "sqrt": math.sqrt, "abs": abs}
_PHI_NODE_TYPES = (
    ast.Expression, ast.BinOp, ast.UnaryOp, ast.Constant, ast.Name, ast.Call, ast.Load,
    ast.Add, ast.Sub, ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd,
)


def phi_from_expression(expr: str) -> PhiFn:
    """Small arithmetic grammar over named coordinates.

    Names: V0, kappa, lambda (or lam), nu, rho, r, H, C, sigma_obs, and V1,
    V2, ... for the unit-time volatility values.  Functions: log, exp, sqrt,
    abs.  Operators: + - * / ** and unary minus.
    """
    source = re.sub(r"\blambda\b", "lam", expr)
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as err:
        raise ValueError(f"cannot parse functional expression {expr!r}: {err}") from None
    scalar_names = {"V0", "kappa", "lam", "nu", "rho", "r", "H", "C", "sigma_obs"}
    for node in ast.walk(tree):
        if not isinstance(node, _PHI_NODE_TYPES):
            raise ValueError(f"unsupported syntax in functional expression: {ast.dump(node)}")
        if isinstance(node, ast.Call):
            if not (isinstance(node.func, ast.Name) and node.func.id in _PHI_FUNCS) or node.keywords:
                raise ValueError("only log/exp/sqrt/abs calls are allowed in functionals")
        if isinstance(node, ast.Name) and node.id not in _PHI_FUNCS:
            if node.id not in scalar_names and not re.fullmatch(r"V[1-9]\d*", node.id):
                raise ValueError(f"unknown name in functional expression: {node.id!r}")
    code = compile(tree, "<phi>", "eval")

    def fn(theta: ModelParams, v: np.ndarray) -> float:
        record = params_to_record(theta)
        env = {
            "V0": record["V0"], "kappa": record["kappa"], "lam": record["lambda"],
            "nu": record["nu"], "rho": record["rho"], "r": record["r"],
            "H": record["H"], "C": record["C"], "sigma_obs": record["sigma_obs"],
        }
        env.update({f"V{i + 1}": float(v[i]) for i in range(len(v))})
        env.update(_PHI_FUNCS)
        return float(eval(code, {"__builtins__": {}}, env))

    return PhiFn(name=expr, fn=fn)


# ---------------------------------------------------------------------------
# Coupling weights
# ---------------------------------------------------------------------------


def log_h_from_log_densities(
    ld_fine: np.ndarray, ld_coarse: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """log H1 / log H2 from per-t log densities; rows vectorize over samples.

    For every t one of the two per-t factors is exactly 1 because the max is
    attained by one argument, so both outputs are <= 0 with at least one 0
    per row pairwise.  A vanished per-t density (-inf) is an error.
    """
    ld_fine = np.atleast_2d(ld_fine)
    ld_coarse = np.atleast_2d(ld_coarse)
    lmax = np.maximum(ld_fine, ld_coarse)
    log_h1 = np.sum(ld_fine - lmax, axis=1)
    log_h2 = np.sum(ld_coarse - lmax, axis=1)
    if np.any(~np.isfinite(log_h1)) or np.any(~np.isfinite(log_h2)):
        raise DegenerateWeightError("a per-t observation density vanished in an H weight")
    return log_h1, log_h2


def h_from_log_densities(ld_fine: np.ndarray, ld_coarse: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """H1/H2 as raw reals in (0, 1].  A weight too small for a (subnormal)
    double raises instead of silently flushing to zero; estimator code works
    with `log_h_from_log_densities` and self-normalization instead."""
    log_h1, log_h2 = log_h_from_log_densities(ld_fine, ld_coarse)
    h1 = np.exp(log_h1)
    h2 = np.exp(log_h2)
    if np.any(h1 == 0.0) or np.any(h2 == 0.0):
        raise DegenerateWeightError("an H weight underflowed the representable double range")
    return h1, h2


def _per_t_log_densities(
    thetas: Sequence[ModelParams],
    W: np.ndarray,
    level: Level,
    y: ObservationSeries,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-record per-t observation log densities plus unit-time skeletons.

    Rebuilds the Euler paths for the increment rows in ``W`` (one row per
    record).  Records sharing kernel parameters are batched; per-row vol
    coefficients are handled by broadcasting.  Returns (log_dens (R, T),
    skeleton (R, T)).
    """
    W = np.atleast_2d(W)
    R = W.shape[0]
    T = y.T
    m = level.steps_per_unit()
    base = thetas[0]

    ld = np.empty((R, T))
    skel = np.empty((R, T))
    kernels = [(th.kernel.C, th.kernel.H) for th in thetas]
    for ck in sorted(set(kernels)):
        rows = np.flatnonzero([k == ck for k in kernels])
        group = [thetas[i] for i in rows]
        coeffs = (
            np.array([th.vol.V0 for th in group]),
            np.array([th.vol.kappa for th in group]),
            np.array([th.vol.lam for th in group]),
            np.array([th.vol.nu for th in group]),
        )
        V = euler_paths(coeffs, group[0].kernel, W[rows], level, T)
        skel[rows] = V[:, m::m]
        if base.model_kind is ModelKind.STATE_SPACE:
            sigma2 = np.array([th.sigma_obs for th in group])[:, None] ** 2
            ld[rows] = _sanitized_logpdf(y.y[None, :], V[:, m::m], sigma2)
        else:
            av = np.abs(V[:, :-1]).reshape(len(rows), T, m)
            w_cells = W[rows].reshape(len(rows), T, m)
            with np.errstate(invalid="ignore", over="ignore"):
                s1 = np.einsum("rtm,rtm->rt", np.sqrt(av), w_cells)
                s2 = av.sum(axis=2)
            rho = np.array([th.rho for th in group])[:, None]
            drift = np.array(
                [th.r if th.include_drift else 0.0 for th in group]
            )[:, None]
            y_prev = np.concatenate(([y.y0], y.y[:-1]))[None, :]
            mean = y_prev + drift + rho * s1
            var = (1.0 - rho**2) * level.step() * s2
            ld[rows] = _sanitized_logpdf(y.y[None, :], mean, var)
    return ld, skel


def h_weights(
    theta: ModelParams,
    fine: IncrementPath,
    coarse: IncrementPath,
    y: ObservationSeries,
    level: Level,
) -> tuple[float, float]:
    """Coupling weights (H1, H2) in (0, 1] for one fine/coarse pair."""
    if level.l < 1 or fine.level != level or coarse.level.l != level.l - 1:
        raise ValueError("h_weights needs a level-l fine path and its level-(l-1) coarse pair")
    if not np.array_equal(coarsen(fine).values, coarse.values):
        raise ValueError("coarse path is not the pairwise coarsening of the fine path")
    ld_f, _ = _per_t_log_densities([theta], fine.values[None, :], level, y)
    ld_c, _ = _per_t_log_densities([theta], coarse.values[None, :], coarse.level, y)
    h1, h2 = h_from_log_densities(ld_f, ld_c)
    return float(h1[0]), float(h2[0])


# ---------------------------------------------------------------------------
# Level increment estimator
# ---------------------------------------------------------------------------


def self_normalized_difference(
    phi_fine: np.ndarray,
    phi_coarse: np.ndarray,
    h1: np.ndarray,
    h2: np.ndarray,
    counts: np.ndarray | None = None,
) -> float:
    """sum(phi_f h1)/sum(h1) - sum(phi_c h2)/sum(h2), with optional
    per-sample multiplicities.  Invariant to rescaling h1 (or h2) by a
    positive constant."""
    c = np.ones_like(h1) if counts is None else np.asarray(counts, dtype=float)
    den1 = float(np.sum(c * h1))
    den2 = float(np.sum(c * h2))
    if den1 == 0.0 or den2 == 0.0:
        raise DegenerateDenominatorError("an H-weight sum is numerically zero")
    num1 = float(np.sum(c * h1 * phi_fine))
    num2 = float(np.sum(c * h2 * phi_coarse))
    return num1 / den1 - num2 / den2


def _dedupe_coupled(records: Sequence[ChainRecord]):
    """Collapse copy-forward duplicates (shared trajectory objects) into
    unique rows with multiplicities."""
    ids: dict[int, int] = {}
    thetas: list[ModelParams] = []
    pairs: list[CoupledPath] = []
    counts: list[int] = []
    for rec in records:
        key = id(rec.trajectory)
        if key in ids:
            counts[ids[key]] += 1
        else:
            ids[key] = len(thetas)
            thetas.append(rec.theta)
            pairs.append(rec.trajectory)
            counts.append(1)
    return thetas, pairs, np.array(counts, dtype=float)


def _increment_core(
    thetas: Sequence[ModelParams],
    pairs: Sequence[CoupledPath],
    counts: np.ndarray,
    y: ObservationSeries,
    level: Level,
    phis: Sequence[PhiFn],
) -> list[float]:
    W_f = np.stack([p.fine.values for p in pairs])
    W_c = np.stack([p.coarse.values for p in pairs])
    ld_f, skel_f = _per_t_log_densities(thetas, W_f, level, y)
    ld_c, skel_c = _per_t_log_densities(thetas, W_c, level.coarser(), y)
    log_h1, log_h2 = log_h_from_log_densities(ld_f, ld_c)
    # the estimator is invariant to rescaling either weight set, so shift
    # each by its own maximum before exponentiating: exact in log space,
    # no underflow for the dominant samples
    h1 = np.exp(log_h1 - log_h1.max())
    h2 = np.exp(log_h2 - log_h2.max())
    out = []
    for phi in phis:
        pf = np.array([phi(th, skel_f[i]) for i, th in enumerate(thetas)])
        pc = np.array([phi(th, skel_c[i]) for i, th in enumerate(thetas)])
        out.append(self_normalized_difference(pf, pc, h1, h2, counts))
    return out


def increment_estimator(chain: Chain, phi: PhiFn) -> float:
    """Self-normalized estimate of E_{pi^l}[phi] - E_{pi^{l-1}}[phi] from a
    coupled chain whose burn-in has already been removed."""
    if not chain.coupled:
        raise ValueError("increment_estimator needs a coupled chain")
    thetas, pairs, counts = _dedupe_coupled(chain.records)
    return _increment_core(thetas, pairs, counts, _chain_series(chain), chain.level, [phi])[0]


def increment_from_outputs(
    theta: ModelParams,
    outputs: Sequence[FilterOutput],
    y: ObservationSeries,
    level: Level,
    phi: PhiFn,
) -> float:
    """Level increment from independent fixed-parameter delta-filter draws."""
    pairs = [o.trajectory for o in outputs]
    thetas = [theta] * len(pairs)
    return _increment_core(thetas, pairs, np.ones(len(pairs)), y, level, [phi])[0]


def fixed_theta_increment(
    y: ObservationSeries,
    level: Level,
    N: int,
    M: int,
    theta: ModelParams,
    rng: np.random.Generator,
    phi: PhiFn,
) -> float:
    """Run the delta filter M times at a fixed parameter value and form the
    level-increment estimate from the selected coupled pairs."""
    outputs = [delta_particle_filter(y, level, N, theta, rng) for _ in range(M)]
    return increment_from_outputs(theta, outputs, y, level, phi)


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LevelAllocation:
    """Target accuracy, terminal level, and per-level chain lengths."""

    epsilon: float
    H: float
    L: int
    M: tuple[int, ...]
    base_level: int = 0

    def __post_init__(self):
        if self.base_level < 0 or self.L < max(1, self.base_level):
            raise ValueError("allocation needs 0 <= base_level and L >= max(1, base_level)")
        if len(self.M) != self.L - self.base_level + 1:
            raise ValueError("allocation must give one chain length per level base..L")
        if any(m < 1 for m in self.M):
            raise ValueError("chain lengths must be positive")

    @property
    def levels(self) -> range:
        return range(self.base_level, self.L + 1)

    def chain_length(self, level: int) -> int:
        return self.M[level - self.base_level]

    def costs(self) -> np.ndarray:
        """Per-level cost tallies M_l / dt_l^2 in scaled units."""
        return np.array([self.chain_length(l) * 4.0**l for l in self.levels])


def choose_levels(
    epsilon: float,
    H: float,
    c_M: float = 1.0,
    c_L: float = 1.0,
    M_min: int = 50,
    base_level: int = 0,
) -> LevelAllocation:
    """Terminal level and chain lengths for a target RMSE of ``epsilon``:

        L   = max(1, ceil(c_L * 2 * log2(1/eps) / (2H+1)))
        M_l = max(M_min, ceil(c_M * eps^-2 * dt_l^{(2H+3)/2} * dt_L^{H-1/2}))
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0.0 <= H < 0.5:
        raise ValueError("H must lie in [0, 0.5)")
    if c_M <= 0 or c_L <= 0 or M_min < 1:
        raise ValueError("allocation constants must be positive")
    L = max(1, math.ceil(c_L * 2.0 * math.log2(1.0 / epsilon) / (2.0 * H + 1.0)))
    L = max(L, base_level + 1)
    dt_L = 2.0 ** (-L)
    M = []
    for l in range(base_level, L + 1):
        dt_l = 2.0 ** (-l)
        m_l = c_M * epsilon**-2 * dt_l ** ((2.0 * H + 3.0) / 2.0) * dt_L ** (H - 0.5)
        M.append(max(M_min, math.ceil(m_l)))
    return LevelAllocation(epsilon=epsilon, H=H, L=L, M=tuple(M), base_level=base_level)


# ---------------------------------------------------------------------------
# Multilevel and single-level estimators
# ---------------------------------------------------------------------------


@dataclass
class MLEstimate:
    """One functional's multilevel estimate with its stored components."""

    name: str
    value: float
    per_level_increments: np.ndarray
    costs: np.ndarray
    allocation: LevelAllocation
    variance_proxy: np.ndarray | None = None


@dataclass
class MLRunResult:
    estimates: dict[str, MLEstimate]
    chains: list[Chain]
    allocation: LevelAllocation
    seed: int
    burn_in: float

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.allocation.costs()))


def _base_term(chain_records: Sequence[ChainRecord], y, level, phis) -> list[float]:
    thetas, paths, counts = _dedupe_single(chain_records)
    W = np.stack([p.values for p in paths])
    _, skel = _per_t_log_densities(thetas, W, level, y)
    total = counts.sum()
    out = []
    for phi in phis:
        vals = np.array([phi(th, skel[i]) for i, th in enumerate(thetas)])
        out.append(float(np.sum(counts * vals) / total))
    return out


def _dedupe_single(records: Sequence[ChainRecord]):
    ids: dict[int, int] = {}
    thetas, paths, counts = [], [], []
    for rec in records:
        key = id(rec.trajectory)
        if key in ids:
            counts[ids[key]] += 1
        else:
            ids[key] = len(thetas)
            thetas.append(rec.theta)
            paths.append(rec.trajectory)
            counts.append(1)
    return thetas, paths, np.array(counts, dtype=float)


def _chain_series(chain: Chain) -> ObservationSeries:
    if chain.series is None:
        raise SvemcError("chain does not carry its observation series")
    return chain.series


def _run_level_chain(args):
    (y, level_idx, base_level, N, M, cfg, seed, template, fixed, burn_in,
     tune_kwargs) = args
    level = Level(level_idx)
    coupled = level_idx != base_level
    if cfg is None:
        cfg = tune_step_sizes(
            y, level, N, derive_rng(seed, "tune", level_idx), template,
            coupled=coupled, fixed=fixed, **tune_kwargs,
        )
    rng = derive_rng(seed, "chain", level_idx)
    runner = coupled_chain if coupled else pmcmc_chain
    try:
        chain = runner(y, level, N, M, cfg, rng, template, fixed)
    except SvemcError as err:
        raise SvemcError(f"level {level_idx} chain failed: {err}") from err
    return level_idx, chain


def ml_estimate(
    y: ObservationSeries,
    alloc: LevelAllocation,
    N: int,
    cfg: ProposalConfig | dict[int, ProposalConfig] | None,
    phis: Sequence[PhiFn],
    seed: int,
    template: ModelParams,
    burn_in: float = 0.1,
    fixed: Sequence[str] = (),
    threads: int = 1,
    tune_kwargs: dict | None = None,
) -> MLRunResult:
    """Full multilevel estimator: a base-level PMCMC chain plus independent
    coupled chains for each increment, telescoped per functional.

    ``cfg`` may be a single proposal shared by all levels, a per-level dict,
    or None to pilot-tune each level.  Chains at different levels use
    independent derived streams and may run in parallel.
    """
    tune_kwargs = tune_kwargs or {}
    tasks = []
    for l in alloc.levels:
        level_cfg = cfg.get(l) if isinstance(cfg, dict) else cfg
        tasks.append(
            (y, l, alloc.base_level, N, alloc.chain_length(l), level_cfg, seed,
             template, tuple(fixed), burn_in, tune_kwargs)
        )
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_level_chain, tasks))
    else:
        results = [_run_level_chain(t) for t in tasks]
    chains = [chain for _, chain in sorted(results, key=lambda r: r[0])]

    base_chain = chains[0]
    base_records = base_chain.post_burn_in(burn_in)
    if not base_records:
        raise InsufficientDataError("no post-burn-in records in the base chain")
    terms = {phi.name: [v] for phi, v in zip(
        phis, _base_term(base_records, y, Level(alloc.base_level), phis)
    )}
    for chain in chains[1:]:
        records = chain.post_burn_in(burn_in)
        if not records:
            raise InsufficientDataError(f"no post-burn-in records at level {chain.level.l}")
        thetas, pairs, counts = _dedupe_coupled(records)
        incs = _increment_core(thetas, pairs, counts, y, chain.level, phis)
        for phi, inc in zip(phis, incs):
            terms[phi.name].append(inc)

    costs = alloc.costs()
    estimates = {}
    for phi in phis:
        parts = np.array(terms[phi.name])
        estimates[phi.name] = MLEstimate(
            name=phi.name,
            value=float(np.sum(parts)),
            per_level_increments=parts,
            costs=costs,
            allocation=alloc,
        )
    return MLRunResult(
        estimates=estimates, chains=chains, allocation=alloc, seed=seed, burn_in=burn_in
    )


def single_level_estimate(
    y: ObservationSeries,
    level: Level,
    M: int,
    N: int,
    cfg: ProposalConfig,
    phis: Sequence[PhiFn],
    rng: np.random.Generator,
    template: ModelParams,
    burn_in: float = 0.1,
    fixed: Sequence[str] = (),
) -> tuple[dict[str, float], float]:
    """Ergodic averages of the functionals over one PMCMC chain, plus the
    M / dt^2 cost tally."""
    chain = pmcmc_chain(y, level, N, M, cfg, rng, template, fixed)
    records = chain.post_burn_in(burn_in)
    if not records:
        raise InsufficientDataError("no post-burn-in records to average")
    values = _base_term(records, y, level, phis)
    cost = M * 4.0**level.l
    return {phi.name: v for phi, v in zip(phis, values)}, cost
