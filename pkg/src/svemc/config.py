"""Run configuration: INI-style key-value file with sections, strict
validation, resolved-default echoing, and price-series ingestion.

Unknown sections or keys are hard errors so typos never silently fall back
to defaults.  Every run writes a ``resolved_config.json`` echo capturing the
values actually used, and all output files embed the echo's hash plus the
root seed.
"""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import KernelParams, VolParams
from .errors import ConfigError, DataSchemaError, InsufficientDataError
from .models import ModelKind, ModelParams, ObservationSeries, active_names


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "sv"
    estimate_h: bool = False
    include_drift: bool = True
    c: float = 0.7
    h: float = 0.4
    v0: float = 1.0
    kappa: float = 1.0
    lam: float = 1.0
    nu: float = 0.5
    rho: float = 0.0
    r: float = 0.0
    sigma_obs: float = 0.8
    y0: float = 0.0
    fixed: tuple[str, ...] = ()


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    path: str = ""
    t: int = 100
    data_level: int = 6


@dataclass(frozen=True)
class InferenceConfig:
    n_particles: int = 100
    m_iterations: int = 1000
    level: int = 3
    epsilon: float = 0.2
    base_level: int = 0
    burn_in: float = 0.1
    step_size: float = 0.25
    pilot_tune: bool = True
    pilot_rounds: int = 8
    pilot_iters: int = 80
    c_m: float = 1.0
    c_l: float = 1.0
    m_min: int = 50
    init_retries: int = 100


@dataclass(frozen=True)
class RateStudySection:
    epsilons: tuple[float, ...] = (0.4, 0.2, 0.1)
    replicates: int = 16
    batches: int = 4
    c_single: float = 1.0
    m_min_single: int = 50
    reference_m: int = 0  # 0 means 20x the largest single-level length
    reference_level: int = -1  # -1 means the largest level of the grid


@dataclass(frozen=True)
class PredictSection:
    t_pred: int = 0  # 0 means the observed series length
    n_draws: int = 100
    sim_level: int = -1  # -1 means the allocation's terminal level
    max_lag: int = 10


@dataclass(frozen=True)
class ReturnsSection:
    max_lag: int = 20


@dataclass(frozen=True)
class OutputSection:
    dir: str = "out"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    rate_study: RateStudySection = field(default_factory=RateStudySection)
    predict: PredictSection = field(default_factory=PredictSection)
    returns: ReturnsSection = field(default_factory=ReturnsSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0

    def template_params(self) -> ModelParams:
        m = self.model
        return ModelParams(
            vol=VolParams(V0=m.v0, kappa=m.kappa, lam=m.lam, nu=m.nu),
            kernel=KernelParams(C=m.c, H=m.h),
            rho=m.rho,
            r=m.r,
            sigma_obs=m.sigma_obs,
            model_kind=ModelKind(m.kind),
            estimate_H=m.estimate_h,
            include_drift=m.include_drift,
        )


def _parse_bool(raw: str, where: str) -> bool:
    if raw.lower() in ("true", "yes", "1", "on"):
        return True
    if raw.lower() in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{where} must be a boolean, got {raw!r}")


def _parse_float(raw: str, where: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{where} must be a real number, got {raw!r}") from None


def _parse_int(raw: str, where: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{where} must be an integer, got {raw!r}") from None


_SCHEMA = {
    "model": {
        "kind": "str", "estimate_h": "bool", "include_drift": "bool",
        "c": "float", "h": "float", "v0": "float", "kappa": "float",
        "lambda": "float", "nu": "float", "rho": "float", "r": "float",
        "sigma_obs": "float", "y0": "float", "fixed": "list",
    },
    "data": {"source": "str", "path": "str", "t": "int", "data_level": "int"},
    "inference": {
        "n_particles": "int", "m_iterations": "int", "level": "int",
        "epsilon": "float", "base_level": "int", "burn_in": "float",
        "step_size": "float", "pilot_tune": "bool", "pilot_rounds": "int",
        "pilot_iters": "int", "c_m": "float", "c_l": "float", "m_min": "int",
        "init_retries": "int",
    },
    "rate_study": {
        "epsilons": "floatlist", "replicates": "int", "batches": "int",
        "c_single": "float", "m_min_single": "int", "reference_m": "int",
        "reference_level": "int",
    },
    "predict": {"t_pred": "int", "n_draws": "int", "sim_level": "int", "max_lag": "int"},
    "returns": {"max_lag": "int"},
    "output": {"dir": "str"},
    "seeds": {"root": "int"},
}

_FIELD_RENAME = {("model", "lambda"): "lam"}


def parse_config(path: str | Path | None) -> RunConfig:
    """Load and validate a run configuration; a missing path means all
    defaults."""
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str.lower
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config file {path}: {err}") from None
        except configparser.Error as err:
            raise ConfigError(f"malformed config file {path}: {err}") from None
        raw = {s: dict(parser.items(s)) for s in parser.sections()}

    values: dict[str, dict] = {}
    for section, entries in raw.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        values[section] = {}
        for key, text in entries.items():
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key '{key}' in section [{section}]")
            where = f"[{section}] {key}"
            kind = _SCHEMA[section][key]
            if kind == "bool":
                parsed = _parse_bool(text, where)
            elif kind == "int":
                parsed = _parse_int(text, where)
            elif kind == "float":
                parsed = _parse_float(text, where)
            elif kind == "floatlist":
                parsed = tuple(
                    _parse_float(part.strip(), where)
                    for part in text.split(",") if part.strip()
                )
            elif kind == "list":
                parsed = tuple(part.strip() for part in text.split(",") if part.strip())
            else:
                parsed = text.strip()
            field_name = _FIELD_RENAME.get((section, key), key)
            values[section][field_name] = parsed

    cfg = RunConfig(
        model=ModelConfig(**values.get("model", {})),
        data=DataConfig(**values.get("data", {})),
        inference=InferenceConfig(**values.get("inference", {})),
        rate_study=RateStudySection(**values.get("rate_study", {})),
        predict=PredictSection(**values.get("predict", {})),
        returns=ReturnsSection(**values.get("returns", {})),
        output=OutputSection(**values.get("output", {})),
        seed=values.get("seeds", {}).get("root", 0),
    )
    _validate(cfg)
    return cfg


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _validate(cfg: RunConfig) -> None:
    m, d, inf = cfg.model, cfg.data, cfg.inference
    _require(m.kind in ("ssm", "sv"), f"[model] kind must be 'ssm' or 'sv', got {m.kind!r}")
    _require(0.0 <= m.h < 0.5, "H must lie in [0, 0.5)")
    _require(m.c > 0, f"[model] c must be positive, got {m.c}")
    for name in ("v0", "kappa", "lam", "nu"):
        _require(getattr(m, name) > 0, f"[model] {name} must be positive, got {getattr(m, name)}")
    _require(abs(m.rho) <= 1, f"[model] rho must lie in [-1, 1], got {m.rho}")
    _require(m.sigma_obs > 0, f"[model] sigma_obs must be positive, got {m.sigma_obs}")
    kind = ModelKind(m.kind)
    valid_names = set(active_names(kind, m.estimate_h))
    for name in m.fixed:
        _require(
            name in valid_names,
            f"[model] fixed names must be active parameters {sorted(valid_names)}, got {name!r}",
        )
    _require(d.source in ("synthetic", "csv"),
             f"[data] source must be 'synthetic' or 'csv', got {d.source!r}")
    _require(d.t >= 1, f"[data] t must be at least 1, got {d.t}")
    _require(d.data_level >= 0, f"[data] data_level must be non-negative, got {d.data_level}")
    _require(inf.n_particles >= 1, f"[inference] n_particles must be >= 1, got {inf.n_particles}")
    _require(inf.m_iterations >= 1, f"[inference] m_iterations must be >= 1, got {inf.m_iterations}")
    _require(inf.level >= 0, f"[inference] level must be non-negative, got {inf.level}")
    _require(0 < inf.epsilon < 1, f"[inference] epsilon must lie in (0, 1), got {inf.epsilon}")
    _require(inf.base_level >= 0, f"[inference] base_level must be non-negative, got {inf.base_level}")
    _require(0 <= inf.burn_in < 1, f"[inference] burn_in must lie in [0, 1), got {inf.burn_in}")
    _require(inf.step_size > 0, f"[inference] step_size must be positive, got {inf.step_size}")
    _require(inf.c_m > 0 and inf.c_l > 0,
             "[inference] c_m and c_l must be positive")
    _require(inf.m_min >= 1, f"[inference] m_min must be >= 1, got {inf.m_min}")
    rs = cfg.rate_study
    _require(len(rs.epsilons) >= 1 and all(0 < e < 1 for e in rs.epsilons),
             "[rate_study] epsilons must all lie in (0, 1)")
    _require(rs.replicates >= rs.batches >= 1,
             "[rate_study] needs replicates >= batches >= 1")
    _require(cfg.predict.n_draws >= 1, "[predict] n_draws must be >= 1")
    _require(cfg.returns.max_lag >= 1, "[returns] max_lag must be >= 1")
    _require(cfg.seed >= 0, f"[seeds] root must be non-negative, got {cfg.seed}")


def resolved_dict(cfg: RunConfig) -> dict:
    """Nested plain-value view of every resolved setting (the echo body)."""
    return {
        "model": {
            "kind": cfg.model.kind, "estimate_h": cfg.model.estimate_h,
            "include_drift": cfg.model.include_drift, "c": cfg.model.c,
            "h": cfg.model.h, "v0": cfg.model.v0, "kappa": cfg.model.kappa,
            "lambda": cfg.model.lam, "nu": cfg.model.nu, "rho": cfg.model.rho,
            "r": cfg.model.r, "sigma_obs": cfg.model.sigma_obs,
            "y0": cfg.model.y0, "fixed": list(cfg.model.fixed),
        },
        "data": {
            "source": cfg.data.source, "path": cfg.data.path,
            "t": cfg.data.t, "data_level": cfg.data.data_level,
        },
        "inference": {
            "n_particles": cfg.inference.n_particles,
            "m_iterations": cfg.inference.m_iterations,
            "level": cfg.inference.level, "epsilon": cfg.inference.epsilon,
            "base_level": cfg.inference.base_level, "burn_in": cfg.inference.burn_in,
            "step_size": cfg.inference.step_size, "pilot_tune": cfg.inference.pilot_tune,
            "pilot_rounds": cfg.inference.pilot_rounds,
            "pilot_iters": cfg.inference.pilot_iters, "c_m": cfg.inference.c_m,
            "c_l": cfg.inference.c_l, "m_min": cfg.inference.m_min,
            "init_retries": cfg.inference.init_retries,
        },
        "rate_study": {
            "epsilons": list(cfg.rate_study.epsilons),
            "replicates": cfg.rate_study.replicates, "batches": cfg.rate_study.batches,
            "c_single": cfg.rate_study.c_single,
            "m_min_single": cfg.rate_study.m_min_single,
            "reference_m": cfg.rate_study.reference_m,
            "reference_level": cfg.rate_study.reference_level,
        },
        "predict": {
            "t_pred": cfg.predict.t_pred, "n_draws": cfg.predict.n_draws,
            "sim_level": cfg.predict.sim_level, "max_lag": cfg.predict.max_lag,
        },
        "returns": {"max_lag": cfg.returns.max_lag},
        "output": {"dir": cfg.output.dir},
        "seeds": {"root": cfg.seed},
    }


def config_hash(cfg: RunConfig) -> str:
    body = json.dumps(resolved_dict(cfg), sort_keys=True).encode("utf-8")
    return hashlib.sha256(body).hexdigest()


# ---------------------------------------------------------------------------
# Price-series ingestion
# ---------------------------------------------------------------------------


def load_price_series(path: str | Path) -> ObservationSeries:
    """Read a CSV of positive prices (or a single returns column) into the
    log-return observation series: n price rows yield n-1 returns, stored as
    log-price levels with y0 the first log price."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            content = fh.read()
    except OSError as err:
        raise DataSchemaError(f"cannot read price file {path}: {err}") from None
    lines = [ln for ln in content.splitlines() if not ln.startswith("#")]
    if not lines:
        raise DataSchemaError(f"{path}: empty file")
    reader = csv.reader(io.StringIO("\n".join(lines)))
    header = [h.strip().lower() for h in next(reader)]

    price_col = next((i for i, h in enumerate(header) if "price" in h), None)
    returns_col = next((i for i, h in enumerate(header) if "return" in h), None)
    if price_col is None and returns_col is None:
        raise DataSchemaError(
            f"{path}: header must name a 'price' column (optionally with a date column) "
            f"or a single returns column, got {header}"
        )
    col = price_col if price_col is not None else returns_col
    values = []
    for row_number, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if col >= len(row):
            raise DataSchemaError(f"{path}: row {row_number} is missing column {header[col]!r}")
        try:
            value = float(row[col])
        except ValueError:
            raise DataSchemaError(
                f"{path}: row {row_number}: cannot parse {row[col]!r} as a number"
            ) from None
        if price_col is not None and value <= 0:
            raise DataSchemaError(f"{path}: row {row_number}: non-positive price {value}")
        values.append(value)

    if price_col is not None:
        if len(values) < 2:
            raise InsufficientDataError(
                f"{path}: need at least 2 price rows to form returns, got {len(values)}"
            )
        log_prices = np.log(np.array(values))
        return ObservationSeries(y=log_prices[1:], y0=float(log_prices[0]))
    if len(values) < 1:
        raise InsufficientDataError(f"{path}: returns column is empty")
    returns = np.array(values)
    return ObservationSeries(y=np.cumsum(returns), y0=0.0)
