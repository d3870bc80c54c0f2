"""Command-line front end.

Subcommands: simulate, pmcmc, mlpmcmc, rate-study, analyze-returns, predict.
Global flags: --config PATH, --seed U64, --threads N, --exact, --out DIR.
Environment overrides use the SVEMC_ prefix (SVEMC_CONFIG, SVEMC_SEED,
SVEMC_THREADS, SVEMC_EXACT, SVEMC_OUT); precedence is flag > environment >
config file > default.

Every run writes a resolved_config.json echo; every output file embeds the
echo's hash and the root seed (CSV header comment line / JSON fields).
Numeric CSV output is full-precision scientific notation.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import experiments, multilevel
from .config import (
    RunConfig,
    config_hash,
    load_price_series,
    parse_config,
    resolved_dict,
)
from .core import Level
from .errors import ConfigError, SvemcError
from .mcmc import Chain, ProposalConfig, pmcmc_chain, tune_step_sizes
from .models import PARAM_NAMES, ModelKind, active_names, params_to_record
from .multilevel import choose_levels, default_phis
from .seeding import derive_rng

logger = logging.getLogger(__name__)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17e}"
    return str(value)


def write_csv(path: Path, columns: list[str], rows: list[list], meta: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# config_hash={meta['config_hash']} seed={meta['seed']}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path: Path, body: dict, meta: dict) -> None:
    payload = {"config_hash": meta["config_hash"], "seed": meta["seed"], **body}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)!r}")


class _Run:
    """Resolved invocation context shared by every subcommand."""

    def __init__(self, cfg: RunConfig, seed: int, out_dir: Path, threads: int, exact: bool):
        self.cfg = cfg
        self.seed = seed
        self.out = out_dir
        self.threads = 1 if exact else threads
        self.exact = exact
        self.template = cfg.template_params()
        self.meta = {"config_hash": config_hash(cfg), "seed": seed}
        out_dir.mkdir(parents=True, exist_ok=True)
        echo = dict(resolved_dict(cfg))
        echo["seeds"]["root"] = seed
        echo["runtime"] = {"threads": self.threads, "exact": exact}
        write_json(out_dir / "resolved_config.json", echo, self.meta)

    def observations(self):
        """Dataset per the [data] section: CSV ingestion or seeded synthesis."""
        cfg = self.cfg
        if cfg.data.source == "csv":
            if not cfg.data.path:
                raise ConfigError("[data] path is required when source = csv")
            return load_price_series(cfg.data.path), None
        dataset = experiments.generate_synthetic(
            ModelKind(cfg.model.kind),
            self.template,
            cfg.data.t,
            Level(cfg.data.data_level),
            derive_rng(self.seed, "data"),
            y0=cfg.model.y0,
        )
        return dataset.y, dataset

    def proposal_for(self, y, level: Level, coupled: bool) -> ProposalConfig:
        inf = self.cfg.inference
        names = active_names(self.template.model_kind, self.template.estimate_H)
        if not inf.pilot_tune:
            return ProposalConfig.from_scalar(inf.step_size, len(names))
        kind = "cpl" if coupled else "pm"
        return tune_step_sizes(
            y, level, inf.n_particles,
            derive_rng(self.seed, "tune", kind, level.l),
            self.template, coupled=coupled, fixed=self.cfg.model.fixed,
            rounds=inf.pilot_rounds, pilot_iters=inf.pilot_iters,
            initial_step=inf.step_size,
        )


def _chain_rows(chain: Chain, level: Level) -> list[list]:
    rows = []
    for k, rec in enumerate(chain.records):
        record = params_to_record(rec.theta)
        rows.append(
            [k, level.l] + [record[name] for name in PARAM_NAMES]
            + [rec.log_z, int(rec.accepted)]
        )
    return rows


_CHAIN_COLUMNS = ["iteration", "level"] + list(PARAM_NAMES) + ["log_z_hat", "accepted"]


def cmd_simulate(run: _Run) -> None:
    if run.cfg.data.source != "synthetic":
        raise ConfigError("simulate needs [data] source = synthetic")
    _, dataset = run.observations()
    y = dataset.y
    write_csv(
        run.out / "observations.csv",
        ["t", "y"],
        [[t + 1, v] for t, v in enumerate(y.y)],
        run.meta,
    )
    lvl = dataset.data_level
    dt = lvl.step()
    write_csv(
        run.out / "latent_volatility.csv",
        ["grid_index", "time", "v"],
        [[k, k * dt, v] for k, v in enumerate(dataset.latent_truth.values)],
        run.meta,
    )
    if dataset.model_kind is ModelKind.STOCH_VOL:
        levels = np.concatenate(([y.y0], y.y))
        write_csv(
            run.out / "prices.csv",
            ["price"],
            [[p] for p in np.exp(levels)],
            run.meta,
        )
    print(f"simulate: wrote {len(y.y)} observations to {run.out}")


def cmd_pmcmc(run: _Run) -> None:
    y, _ = run.observations()
    inf = run.cfg.inference
    level = Level(inf.level)
    cfg = run.proposal_for(y, level, coupled=False)
    chain = pmcmc_chain(
        y, level, inf.n_particles, inf.m_iterations, cfg,
        derive_rng(run.seed, "chain", level.l), run.template,
        fixed=run.cfg.model.fixed, init_retries=inf.init_retries,
    )
    write_csv(run.out / "chain.csv", _CHAIN_COLUMNS, _chain_rows(chain, level), run.meta)
    records = chain.post_burn_in(inf.burn_in)
    names = active_names(run.template.model_kind, run.template.estimate_H)
    means = {
        name: float(np.mean([params_to_record(r.theta)[name] for r in records]))
        for name in names
    }
    write_json(
        run.out / "summary.json",
        {
            "level": level.l,
            "iterations": inf.m_iterations,
            "n_particles": inf.n_particles,
            "burn_in": inf.burn_in,
            "acceptance_rate": chain.acceptance_rate,
            "n_collapsed": chain.n_collapsed,
            "posterior_means": means,
            "cost": inf.m_iterations * 4.0**level.l,
            "step_sizes": cfg.step_sizes,
        },
        run.meta,
    )
    print(f"pmcmc: level {level.l}, acceptance {chain.acceptance_rate:.3f}, wrote {run.out}")


def _run_ml(run: _Run, y):
    inf = run.cfg.inference
    alloc = choose_levels(
        inf.epsilon, run.cfg.model.h, c_M=inf.c_m, c_L=inf.c_l,
        M_min=inf.m_min, base_level=inf.base_level,
    )
    cfgs = None
    if not inf.pilot_tune:
        names = active_names(run.template.model_kind, run.template.estimate_H)
        cfgs = ProposalConfig.from_scalar(inf.step_size, len(names))
    phis = default_phis(run.template.model_kind, run.template.estimate_H)
    return multilevel.ml_estimate(
        y, alloc, inf.n_particles, cfgs, phis, seed=run.seed,
        template=run.template, burn_in=inf.burn_in, fixed=run.cfg.model.fixed,
        threads=run.threads,
        tune_kwargs={"rounds": inf.pilot_rounds, "pilot_iters": inf.pilot_iters,
                     "initial_step": inf.step_size},
    )


def _write_ml(run: _Run, result) -> None:
    alloc = result.allocation
    for chain in result.chains:
        write_csv(
            run.out / f"chain_l{chain.level.l}.csv",
            _CHAIN_COLUMNS,
            _chain_rows(chain, chain.level),
            run.meta,
        )
    write_json(
        run.out / "mlpmcmc.json",
        {
            "burn_in": result.burn_in,
            "allocation": {
                "epsilon": alloc.epsilon, "H": alloc.H, "L": alloc.L,
                "base_level": alloc.base_level, "M": list(alloc.M),
            },
            "total_cost": result.total_cost,
            "estimates": {
                name: {
                    "value": est.value,
                    "per_level_increments": est.per_level_increments,
                    "costs": est.costs,
                }
                for name, est in result.estimates.items()
            },
        },
        run.meta,
    )
    write_csv(
        run.out / "param_means.csv",
        ["parameter", "estimate"],
        [[name, est.value] for name, est in result.estimates.items()],
        run.meta,
    )


def cmd_mlpmcmc(run: _Run) -> None:
    y, _ = run.observations()
    result = _run_ml(run, y)
    _write_ml(run, result)
    print(
        f"mlpmcmc: levels {result.allocation.base_level}..{result.allocation.L}, "
        f"cost {result.total_cost:.3e}, wrote {run.out}"
    )


def cmd_rate_study(run: _Run) -> None:
    if run.cfg.data.source != "synthetic":
        raise ConfigError("rate-study needs [data] source = synthetic")
    _, dataset = run.observations()
    rs = run.cfg.rate_study
    inf = run.cfg.inference
    H = run.cfg.model.h
    allocs = [choose_levels(e, H, c_M=inf.c_m, c_L=inf.c_l, M_min=inf.m_min,
                            base_level=inf.base_level) for e in rs.epsilons]
    top_level = max(a.L for a in allocs)
    ref_level = rs.reference_level if rs.reference_level >= 0 else top_level
    largest_single = max(
        max(rs.m_min_single, math.ceil(rs.c_single * e**-2)) for e in rs.epsilons
    )
    ref_m = rs.reference_m if rs.reference_m > 0 else 20 * largest_single
    reference = experiments.compute_reference(
        dataset, Level(ref_level), ref_m, inf.n_particles, run.seed, run.template,
        fixed=run.cfg.model.fixed, burn_in=inf.burn_in,
        tune_kwargs={"rounds": inf.pilot_rounds, "pilot_iters": inf.pilot_iters,
                     "initial_step": inf.step_size},
    )
    result = experiments.rate_study(
        dataset, ["single", "multilevel"], list(rs.epsilons), rs.replicates,
        reference, inf.n_particles, run.seed, run.template,
        fixed=run.cfg.model.fixed, c_M=inf.c_m, c_L=inf.c_l, M_min=inf.m_min,
        c_single=rs.c_single, M_min_single=rs.m_min_single,
        base_level=inf.base_level, burn_in=inf.burn_in, batches=rs.batches,
        threads=run.threads,
        tune_kwargs={"rounds": inf.pilot_rounds, "pilot_iters": inf.pilot_iters,
                     "initial_step": inf.step_size},
    )
    slope_rows = [
        [p, result.slopes[(p, "single")], result.slopes[(p, "multilevel")]]
        for p in result.param_names
    ]
    write_csv(run.out / "rate_slopes.csv", ["parameter", "pmcmc", "mlpmcmc"],
              slope_rows, run.meta)
    point_rows = [
        [pt["method"], pt["epsilon"], pt["batch"], pt["cost"], p, pt["mse"][p]]
        for pt in result.points for p in result.param_names
    ]
    write_csv(run.out / "rate_points.csv",
              ["method", "epsilon", "batch", "cost", "parameter", "mse"],
              point_rows, run.meta)
    run_rows = [
        [r["method"], r["epsilon"], r["replicate"], r["cost"], p,
         r["estimates"][p], r["sq_errors"][p]]
        for r in result.runs for p in result.param_names
    ]
    write_csv(run.out / "rate_runs.csv",
              ["method", "epsilon", "replicate", "cost", "parameter", "estimate", "sq_error"],
              run_rows, run.meta)
    write_csv(run.out / "rate_reference.csv", ["parameter", "reference"],
              [[p, reference[p]] for p in result.param_names], run.meta)
    print(f"rate-study: wrote slope table for {len(result.param_names)} parameters to {run.out}")


def cmd_analyze_returns(run: _Run) -> None:
    y, _ = run.observations()
    returns = np.diff(np.concatenate(([y.y0], y.y)))
    stats = experiments.return_stats(returns)
    write_csv(
        run.out / "returns_stats.csv",
        ["mean", "variance", "skewness", "kurtosis", "n"],
        [[stats.mean, stats.variance, stats.skewness, stats.kurtosis, stats.n]],
        run.meta,
    )
    curve = experiments.lagged_abs_correlation(returns, run.cfg.returns.max_lag)
    write_csv(
        run.out / "lag_correlation.csv",
        ["lag", "correlation"],
        [[int(lag), corr] for lag, corr in curve],
        run.meta,
    )
    print(f"analyze-returns: {stats.n} returns, wrote {run.out}")


def cmd_predict(run: _Run) -> None:
    y, _ = run.observations()
    result = _run_ml(run, y)
    _write_ml(run, result)
    pd = run.cfg.predict
    t_pred = pd.t_pred if pd.t_pred > 0 else y.T
    sim_level = Level(pd.sim_level if pd.sim_level >= 0 else result.allocation.L)
    stats, curve = experiments.predictive_summaries(
        result, t_pred, pd.n_draws, derive_rng(run.seed, "predict"),
        sim_level, pd.max_lag, y0=run.cfg.model.y0,
    )
    write_csv(
        run.out / "predictive_stats.csv",
        ["mean", "variance", "skewness", "kurtosis", "n"],
        [[stats.mean, stats.variance, stats.skewness, stats.kurtosis, stats.n]],
        run.meta,
    )
    write_csv(
        run.out / "predictive_lag_correlation.csv",
        ["lag", "correlation"],
        [[int(lag), corr] for lag, corr in curve],
        run.meta,
    )
    print(f"predict: {pd.n_draws} draws per level, wrote {run.out}")


_COMMANDS = {
    "simulate": cmd_simulate,
    "pmcmc": cmd_pmcmc,
    "mlpmcmc": cmd_mlpmcmc,
    "rate-study": cmd_rate_study,
    "analyze-returns": cmd_analyze_returns,
    "predict": cmd_predict,
}


def _env(name: str) -> str | None:
    return os.environ.get(f"SVEMC_{name}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="svemc",
        description="Multilevel particle MCMC for partially observed Volterra volatility models",
    )
    parser.add_argument("--config", default=None, help="run configuration file (INI sections)")
    parser.add_argument("--seed", type=int, default=None, help="root seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=None, help="parallel worker count")
    parser.add_argument("--exact", action="store_true", default=None,
                        help="force serial reductions for bitwise reproducibility")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        sub.add_parser(name)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(name)s: %(message)s",
    )
    try:
        config_path = args.config if args.config is not None else _env("CONFIG")
        cfg = parse_config(config_path)
        seed = args.seed if args.seed is not None else int(_env("SEED") or cfg.seed)
        threads = args.threads if args.threads is not None else int(_env("THREADS") or 1)
        exact = args.exact if args.exact is not None else _env("EXACT") in ("1", "true")
        out_dir = Path(args.out if args.out is not None else (_env("OUT") or cfg.output.dir))
        if seed < 0 or threads < 1:
            raise ConfigError("seed must be non-negative and threads at least 1")
        run = _Run(cfg, seed, out_dir, threads, exact)
        _COMMANDS[args.command](run)
    except SvemcError as err:
        print(f"svemc {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
