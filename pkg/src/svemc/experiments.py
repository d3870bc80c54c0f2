"""Synthetic-data generation, the cost-versus-MSE rate study, and the
real-data return-statistics pipeline.

The rate study measures, for a grid of target accuracies, the squared error
of single-level and multilevel posterior-mean estimates against a long
reference run, and fits the slope of log cost against log MSE per parameter.
Replicates are split into batches so the fit has enough (and less noisy)
points; everything is driven by derived seeds, so repeated studies are
bit-identical.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Level, VolatilityPath, euler_volatility_path, sample_increments
from .errors import DegenerateDenominatorError, InsufficientDataError
from .mcmc import Chain, ProposalConfig, tune_step_sizes
from .models import ModelKind, ModelParams, ObservationSeries
from .multilevel import (
    MLRunResult,
    _dedupe_coupled,
    _per_t_log_densities,
    choose_levels,
    default_phis,
    log_h_from_log_densities,
    ml_estimate,
    single_level_estimate,
)
from .seeding import derive_rng, seed_sequence


@dataclass(frozen=True)
class SyntheticDataset:
    model_kind: ModelKind
    true_theta: ModelParams
    data_level: Level
    y: ObservationSeries
    latent_truth: VolatilityPath


def generate_synthetic(
    model_kind: ModelKind,
    true_theta: ModelParams,
    T: int,
    data_level: Level,
    rng: np.random.Generator,
    y0: float = 0.0,
    sigma_obs_override: float | None = None,
) -> SyntheticDataset:
    """Simulate the volatility path at ``data_level`` and draw unit-time
    observations from the model's exact discretized conditional.

    ``sigma_obs_override`` allows a zero observation noise for diagnostics
    (sigma_obs = 0 cannot be represented in ModelParams itself).
    """
    w = sample_increments(data_level, T, rng)
    vol = euler_volatility_path(true_theta.vol, true_theta.kernel, w)
    m = data_level.steps_per_unit()
    noise = rng.standard_normal(T)
    if model_kind is ModelKind.STATE_SPACE:
        sigma = true_theta.sigma_obs if sigma_obs_override is None else sigma_obs_override
        y_values = vol.unit_time_skeleton() + sigma * noise
        series = ObservationSeries(y=y_values, y0=y0)
    else:
        av = np.abs(vol.values[:-1]).reshape(T, m)
        w_cells = w.values.reshape(T, m)
        s1 = np.sum(np.sqrt(av) * w_cells, axis=1)
        s2 = data_level.step() * np.sum(av, axis=1)
        drift = true_theta.r if true_theta.include_drift else 0.0
        increments = (
            drift
            + true_theta.rho * s1
            + np.sqrt((1.0 - true_theta.rho**2) * s2) * noise
        )
        series = ObservationSeries(y=y0 + np.cumsum(increments), y0=y0)
    return SyntheticDataset(
        model_kind=model_kind,
        true_theta=true_theta,
        data_level=data_level,
        y=series,
        latent_truth=vol,
    )


# ---------------------------------------------------------------------------
# Return statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReturnStats:
    """Sample moments of a return series: unbiased variance, skewness and
    kurtosis as standardized central moments (kurtosis is non-excess).
    Degenerate series report NaN for the standardized moments."""

    mean: float
    variance: float
    skewness: float
    kurtosis: float
    n: int


def prices_to_returns(prices: np.ndarray) -> np.ndarray:
    prices = np.asarray(prices, dtype=float)
    if np.any(prices <= 0) or np.any(~np.isfinite(prices)):
        raise ValueError("prices must be positive finite reals")
    return np.diff(np.log(prices))


def return_stats(values, prices: bool = False) -> ReturnStats:
    returns = prices_to_returns(values) if prices else np.asarray(values, dtype=float)
    n = returns.size
    if n < 4:
        raise InsufficientDataError(f"return statistics need at least 4 returns, got {n}")
    mean = float(np.mean(returns))
    centered = returns - mean
    m2 = float(np.mean(centered**2))
    if m2 == 0.0:
        return ReturnStats(mean=mean, variance=0.0, skewness=np.nan, kurtosis=np.nan, n=n)
    m3 = float(np.mean(centered**3))
    m4 = float(np.mean(centered**4))
    return ReturnStats(
        mean=mean,
        variance=float(np.var(returns, ddof=1)),
        skewness=m3 / m2**1.5,
        kurtosis=m4 / m2**2,
        n=n,
    )


def _pearson(x: np.ndarray, z: np.ndarray) -> float:
    xc = x - x.mean()
    zc = z - z.mean()
    denom = math.sqrt(float(np.sum(xc**2)) * float(np.sum(zc**2)))
    if denom == 0.0:
        return np.nan
    return float(np.sum(xc * zc) / denom)


def lagged_abs_correlation(returns, max_lag: int) -> np.ndarray:
    """Rows (lag j, corr(|R_i|, R_{i-j})) for j in -max_lag..max_lag over the
    maximal overlapping window; negative j pairs |R| with future returns."""
    r = np.asarray(returns, dtype=float)
    n = r.size
    if max_lag < 1:
        raise ValueError("max_lag must be at least 1")
    if n <= max_lag + 1:
        raise InsufficientDataError(
            f"lagged correlation with max_lag={max_lag} needs more than {max_lag + 1} returns"
        )
    rows = []
    for j in range(-max_lag, max_lag + 1):
        if j >= 0:
            x, z = np.abs(r[j:]), r[: n - j]
        else:
            x, z = np.abs(r[: n + j]), r[-j:]
        rows.append((float(j), _pearson(x, z)))
    return np.array(rows)


# ---------------------------------------------------------------------------
# Rate study
# ---------------------------------------------------------------------------


@dataclass
class RateStudyResult:
    runs: list[dict]
    points: list[dict]
    slopes: dict[tuple[str, str], float]
    reference: dict[str, float]
    param_names: tuple[str, ...]


def fit_log_cost_slope(mse: np.ndarray, cost: np.ndarray) -> float:
    """Least-squares slope of log cost against log MSE."""
    mse = np.asarray(mse, dtype=float)
    cost = np.asarray(cost, dtype=float)
    usable = np.isfinite(mse) & (mse > 0) & np.isfinite(cost) & (cost > 0)
    if usable.sum() < 4:
        raise InsufficientDataError(
            f"rate fit needs at least 4 usable points, got {int(usable.sum())}"
        )
    return float(np.polyfit(np.log(mse[usable]), np.log(cost[usable]), 1)[0])


def _derived_root(seed: int, *path) -> int:
    return int(seed_sequence(seed, *path).generate_state(1, np.uint64)[0])


def _rate_task(args: dict) -> dict:
    y = ObservationSeries(y=args["y_values"], y0=args["y0"])
    template: ModelParams = args["template"]
    phis = default_phis(template.model_kind, template.estimate_H)
    rep_root = _derived_root(args["seed"], "rep", args["method"], args["i_eps"], args["rep"])
    if args["method"] == "multilevel":
        res = ml_estimate(
            y, args["alloc"], args["N"], args["proposals"], phis,
            seed=rep_root, template=template, burn_in=args["burn_in"], fixed=args["fixed"],
        )
        values = {name: est.value for name, est in res.estimates.items()}
        cost = res.total_cost
    else:
        values, cost = single_level_estimate(
            y, Level(args["level"]), args["M"], args["N"], args["proposals"],
            phis, derive_rng(rep_root, "chain"), template,
            burn_in=args["burn_in"], fixed=args["fixed"],
        )
    reference = args["reference"]
    return {
        "method": args["method"],
        "epsilon": args["epsilon"],
        "replicate": args["rep"],
        "cost": cost,
        "estimates": values,
        "sq_errors": {k: (values[k] - reference[k]) ** 2 for k in values},
    }


def rate_study(
    dataset: SyntheticDataset,
    methods: str | Sequence[str],
    eps_grid: Sequence[float],
    replicates: int,
    reference: dict[str, float],
    N: int,
    seed: int,
    template: ModelParams,
    fixed: Sequence[str] = (),
    c_M: float = 1.0,
    c_L: float = 1.0,
    M_min: int = 50,
    c_single: float | None = None,
    M_min_single: int | None = None,
    base_level: int = 0,
    burn_in: float = 0.1,
    batches: int = 4,
    threads: int = 1,
    tune_n: int | None = None,
    tune_kwargs: dict | None = None,
) -> RateStudyResult:
    """Cost-versus-MSE study over a grid of target accuracies.

    For each accuracy and replicate the chosen estimator runs with a derived
    seed; squared errors against the reference are averaged within replicate
    batches and the per-parameter slope of log cost on log MSE is fitted over
    the (accuracy, batch) cells.
    """
    if isinstance(methods, str):
        methods = [methods]
    for method in methods:
        if method not in ("single", "multilevel"):
            raise ValueError(f"unknown rate-study method {method!r}")
    if replicates < batches or batches < 1:
        raise ValueError("need replicates >= batches >= 1")
    y = dataset.y
    H = template.kernel.H
    c_single = c_M if c_single is None else c_single
    M_min_single = M_min if M_min_single is None else M_min_single
    tune_kwargs = tune_kwargs or {}
    tune_n = N if tune_n is None else tune_n

    allocs = {
        eps: choose_levels(eps, H, c_M=c_M, c_L=c_L, M_min=M_min, base_level=base_level)
        for eps in eps_grid
    }

    proposals: dict[tuple[str, int], ProposalConfig] = {}

    def tuned(kind: str, level: int) -> ProposalConfig:
        key = (kind, level)
        if key not in proposals:
            proposals[key] = tune_step_sizes(
                y, Level(level), tune_n, derive_rng(seed, "tune", kind, level),
                template, coupled=(kind == "cpl"), fixed=fixed, **tune_kwargs,
            )
        return proposals[key]

    tasks = []
    for method in methods:
        for i_eps, eps in enumerate(eps_grid):
            alloc = allocs[eps]
            if method == "multilevel":
                cfgs = {alloc.base_level: tuned("pm", alloc.base_level)}
                for l in range(alloc.base_level + 1, alloc.L + 1):
                    cfgs[l] = tuned("cpl", l)
            else:
                cfgs = tuned("pm", alloc.L)
            for rep in range(replicates):
                tasks.append(
                    {
                        "method": method,
                        "epsilon": eps,
                        "i_eps": i_eps,
                        "rep": rep,
                        "alloc": alloc,
                        "level": alloc.L,
                        "M": max(M_min_single, math.ceil(c_single * eps**-2)),
                        "N": N,
                        "proposals": cfgs,
                        "seed": seed,
                        "template": template,
                        "fixed": tuple(fixed),
                        "burn_in": burn_in,
                        "reference": reference,
                        "y_values": y.y,
                        "y0": y.y0,
                    }
                )
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(_rate_task, tasks))
    else:
        runs = [_rate_task(t) for t in tasks]
    runs.sort(key=lambda r: (r["method"], r["epsilon"], r["replicate"]))

    param_names = tuple(phi.name for phi in default_phis(template.model_kind, template.estimate_H))
    points = []
    for method in methods:
        for eps in eps_grid:
            cell = [r for r in runs if r["method"] == method and r["epsilon"] == eps]
            for b in range(batches):
                members = [r for r in cell if r["replicate"] % batches == b]
                if not members:
                    continue
                points.append(
                    {
                        "method": method,
                        "epsilon": eps,
                        "batch": b,
                        "cost": float(np.mean([r["cost"] for r in members])),
                        "mse": {
                            p: float(np.mean([r["sq_errors"][p] for r in members]))
                            for p in param_names
                        },
                    }
                )

    slopes = {}
    for method in methods:
        rows = [pt for pt in points if pt["method"] == method]
        for p in param_names:
            slopes[(p, method)] = fit_log_cost_slope(
                np.array([pt["mse"][p] for pt in rows]),
                np.array([pt["cost"] for pt in rows]),
            )
    return RateStudyResult(
        runs=runs, points=points, slopes=slopes, reference=reference, param_names=param_names
    )


def compute_reference(
    dataset: SyntheticDataset,
    level: Level,
    M: int,
    N: int,
    seed: int,
    template: ModelParams,
    fixed: Sequence[str] = (),
    burn_in: float = 0.1,
    cfg: ProposalConfig | None = None,
    tune_kwargs: dict | None = None,
) -> dict[str, float]:
    """Posterior-mean reference vector from one long single-level run."""
    phis = default_phis(template.model_kind, template.estimate_H)
    if cfg is None:
        cfg = tune_step_sizes(
            dataset.y, level, N, derive_rng(seed, "tune", "reference"), template,
            fixed=fixed, **(tune_kwargs or {}),
        )
    values, _ = single_level_estimate(
        dataset.y, level, M, N, cfg, phis, derive_rng(seed, "reference"),
        template, burn_in=burn_in, fixed=fixed,
    )
    return values


# ---------------------------------------------------------------------------
# Posterior predictive summaries
# ---------------------------------------------------------------------------


def chain_h_weights(chain: Chain, burn_in: float) -> tuple[list, np.ndarray, np.ndarray]:
    """Post-burn-in records of a coupled chain with their (H1, H2) coupling
    weights, each set normalized by its maximum (a rescaling the
    self-normalized estimators are invariant to)."""
    records = chain.post_burn_in(burn_in)
    thetas, pairs, _ = _dedupe_coupled(records)
    W_f = np.stack([p.fine.values for p in pairs])
    W_c = np.stack([p.coarse.values for p in pairs])
    ld_f, _ = _per_t_log_densities(thetas, W_f, chain.level, chain.series)
    ld_c, _ = _per_t_log_densities(thetas, W_c, chain.level.coarser(), chain.series)
    lh1, lh2 = log_h_from_log_densities(ld_f, ld_c)
    h1_u = np.exp(lh1 - lh1.max())
    h2_u = np.exp(lh2 - lh2.max())
    index = {id(p): i for i, p in enumerate(pairs)}
    rows = np.array([index[id(rec.trajectory)] for rec in records])
    return records, h1_u[rows], h2_u[rows]


def predictive_summaries(
    ml: MLRunResult,
    T_pred: int,
    n_draws: int,
    rng: np.random.Generator,
    sim_level: Level,
    max_lag: int,
    y0: float = 0.0,
) -> tuple[ReturnStats, np.ndarray]:
    """Multilevel posterior-predictive return statistics and lag-correlation
    curve.

    Each level contributes ``n_draws`` uniformly drawn post-burn-in records;
    one fresh path is simulated per draw and used in both H1- and H2-weighted
    averages, mirroring the level-increment estimator's self-normalization.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    if T_pred < 4 or T_pred <= max_lag + 1:
        raise ValueError("T_pred must exceed max(3, max_lag + 1)")
    model_kind = ml.chains[0].records[0].theta.model_kind

    def simulate(theta: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        ds = generate_synthetic(model_kind, theta, T_pred, sim_level, rng, y0=y0)
        returns = np.diff(np.concatenate(([ds.y.y0], ds.y.y)))
        rs = return_stats(returns)
        curve = lagged_abs_correlation(returns, max_lag)[:, 1]
        return np.array([rs.mean, rs.variance, rs.skewness, rs.kurtosis]), curve

    base_records = ml.chains[0].post_burn_in(ml.burn_in)
    if not base_records:
        raise InsufficientDataError("no post-burn-in records in the base chain")
    stats_sum = np.zeros(4)
    curve_sum = np.zeros(2 * max_lag + 1)
    draw_idx = rng.integers(0, len(base_records), n_draws)
    for k in draw_idx:
        s, c = simulate(base_records[k].theta)
        stats_sum += s
        curve_sum += c
    stats_total = stats_sum / n_draws
    curve_total = curve_sum / n_draws

    for chain in ml.chains[1:]:
        records, h1, h2 = chain_h_weights(chain, ml.burn_in)
        if not records:
            raise InsufficientDataError(f"no post-burn-in records at level {chain.level.l}")
        draw_idx = rng.integers(0, len(records), n_draws)
        s_rows = np.empty((n_draws, 4))
        c_rows = np.empty((n_draws, curve_total.size))
        for row, k in enumerate(draw_idx):
            s_rows[row], c_rows[row] = simulate(records[k].theta)
        w1, w2 = h1[draw_idx], h2[draw_idx]
        if w1.sum() == 0.0 or w2.sum() == 0.0:
            raise DegenerateDenominatorError("an H-weight sum vanished in the predictive draw")
        stats_total += s_rows.T @ w1 / w1.sum() - s_rows.T @ w2 / w2.sum()
        curve_total += c_rows.T @ w1 / w1.sum() - c_rows.T @ w2 / w2.sum()

    lags = np.arange(-max_lag, max_lag + 1, dtype=float)
    stats = ReturnStats(
        mean=float(stats_total[0]),
        variance=float(stats_total[1]),
        skewness=float(stats_total[2]),
        kurtosis=float(stats_total[3]),
        n=T_pred,
    )
    return stats, np.column_stack([lags, curve_total])
