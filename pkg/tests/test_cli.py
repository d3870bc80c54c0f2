import json
import math

import numpy as np
import pytest

from svemc.cli import main
from svemc.config import (
    config_hash,
    load_price_series,
    parse_config,
    resolved_dict,
)
from svemc.errors import ConfigError, DataSchemaError, InsufficientDataError


def run_cli(args):
    return main([str(a) for a in args])


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------


def test_empty_config_gives_all_defaults(tmp_path):
    empty = tmp_path / "empty.ini"
    empty.write_text("")
    cfg = parse_config(empty)
    assert cfg == parse_config(None)
    echo = resolved_dict(cfg)
    assert echo["model"]["c"] == 0.7
    assert echo["model"]["h"] == 0.4
    assert echo["data"]["t"] == 100
    assert echo["data"]["data_level"] == 6
    assert echo["inference"]["n_particles"] == 100
    assert echo["seeds"]["root"] == 0


def test_h_out_of_range_message(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nh = 0.6\n")
    with pytest.raises(ConfigError, match=r"H must lie in \[0, 0.5\)"):
        parse_config(bad)


def test_unknown_key_is_hard_error(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nkappa_typo = 1.0\n")
    with pytest.raises(ConfigError, match="kappa_typo"):
        parse_config(bad)
    bad2 = tmp_path / "bad2.ini"
    bad2.write_text("[modle]\nkind = sv\n")
    with pytest.raises(ConfigError, match="modle"):
        parse_config(bad2)


def test_minimal_sv_config_defaults(tmp_path):
    cfgfile = tmp_path / "sv.ini"
    cfgfile.write_text("[model]\nkind = sv\n[data]\nsource = synthetic\n")
    cfg = parse_config(cfgfile)
    assert cfg.data.t == 100
    assert cfg.data.data_level == 6
    assert cfg.model.kind == "sv"


def test_config_lambda_key_and_fixed_list(tmp_path):
    cfgfile = tmp_path / "c.ini"
    cfgfile.write_text("[model]\nkind = ssm\nlambda = 2.5\nfixed = kappa, nu\n")
    cfg = parse_config(cfgfile)
    assert cfg.model.lam == 2.5
    assert cfg.model.fixed == ("kappa", "nu")
    theta = cfg.template_params()
    assert theta.vol.lam == 2.5


def test_config_rejects_bad_fixed_name(tmp_path):
    cfgfile = tmp_path / "c.ini"
    cfgfile.write_text("[model]\nkind = ssm\nfixed = rho\n")
    with pytest.raises(ConfigError, match="fixed"):
        parse_config(cfgfile)


def test_config_hash_stable_and_sensitive(tmp_path):
    a = parse_config(None)
    assert config_hash(a) == config_hash(parse_config(None))
    cfgfile = tmp_path / "c.ini"
    cfgfile.write_text("[seeds]\nroot = 5\n")
    assert config_hash(parse_config(cfgfile)) != config_hash(a)


# ---------------------------------------------------------------------------
# price series ingestion
# ---------------------------------------------------------------------------


def test_load_price_series_exact_logs(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("price\n1.0\n%.17f\n%.17f\n" % (math.e, math.e**2))
    y = load_price_series(f)
    returns = np.diff(np.concatenate(([y.y0], y.y)))
    np.testing.assert_allclose(returns, [1.0, 1.0], rtol=1e-12)


def test_load_price_series_counts(tmp_path):
    f = tmp_path / "p.csv"
    rows = "\n".join(f"2023-01-{i % 28 + 1:02d},{100 + i * 0.25}" for i in range(250))
    f.write_text("date,price\n" + rows + "\n")
    y = load_price_series(f)
    assert y.T == 249


def test_load_price_series_single_row_errors(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("price\n100.0\n")
    with pytest.raises(InsufficientDataError):
        load_price_series(f)


def test_load_price_series_nonpositive_rownumber(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("price\n100.0\n-3.0\n101.0\n")
    with pytest.raises(DataSchemaError, match="row 3"):
        load_price_series(f)


def test_load_price_series_missing_column(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("date,close\n2023-01-01,100.0\n")
    with pytest.raises(DataSchemaError):
        load_price_series(f)


def test_load_returns_column(tmp_path):
    f = tmp_path / "r.csv"
    f.write_text("log_return\n0.01\n-0.02\n0.005\n")
    y = load_price_series(f)
    returns = np.diff(np.concatenate(([y.y0], y.y)))
    np.testing.assert_allclose(returns, [0.01, -0.02, 0.005], rtol=1e-12)


# ---------------------------------------------------------------------------
# CLI commands
# ---------------------------------------------------------------------------


def _write_cfg(tmp_path, body):
    cfgfile = tmp_path / "run.ini"
    cfgfile.write_text(body)
    return cfgfile


def test_simulate_deterministic_bytes(tmp_path):
    cfgfile = _write_cfg(
        tmp_path, "[model]\nkind = sv\n[data]\nsource = synthetic\nt = 20\ndata_level = 3\n"
    )
    out1, out2 = tmp_path / "o1", tmp_path / "o2"
    assert run_cli(["--config", cfgfile, "--seed", 9, "--out", out1, "simulate"]) == 0
    assert run_cli(["--config", cfgfile, "--seed", 9, "--out", out2, "simulate"]) == 0
    for name in ("observations.csv", "latent_volatility.csv", "prices.csv"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_simulate_price_roundtrip(tmp_path):
    cfgfile = _write_cfg(
        tmp_path, "[model]\nkind = sv\n[data]\nsource = synthetic\nt = 30\ndata_level = 2\n"
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--seed", 3, "--out", out, "simulate"]) == 0
    y = load_price_series(out / "prices.csv")
    obs = np.loadtxt(out / "observations.csv", delimiter=",", skiprows=2)[:, 1]
    got = np.diff(np.concatenate(([y.y0], y.y)))
    want = np.diff(np.concatenate(([0.0], obs)))
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_outputs_embed_hash_and_seed(tmp_path):
    cfgfile = _write_cfg(
        tmp_path, "[data]\nsource = synthetic\nt = 10\ndata_level = 2\n"
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--seed", 77, "--out", out, "simulate"]) == 0
    cfg = parse_config(cfgfile)
    first = (out / "observations.csv").read_text().splitlines()[0]
    assert first == f"# config_hash={config_hash(cfg)} seed=77"
    echo = json.loads((out / "resolved_config.json").read_text())
    assert echo["seed"] == 77
    assert echo["seeds"]["root"] == 77


def test_pmcmc_command_chain_csv(tmp_path):
    cfgfile = _write_cfg(
        tmp_path,
        "[model]\nkind = ssm\n"
        "[data]\nsource = synthetic\nt = 3\ndata_level = 3\n"
        "[inference]\nn_particles = 10\nm_iterations = 6\nlevel = 1\npilot_tune = false\n",
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--seed", 1, "--out", out, "pmcmc"]) == 0
    lines = (out / "chain.csv").read_text().splitlines()
    header = lines[1].split(",")
    assert header == [
        "iteration", "level", "V0", "kappa", "lambda", "nu", "H", "C", "rho", "r",
        "sigma_obs", "log_z_hat", "accepted",
    ]
    assert len(lines) == 2 + 7  # comment + header + M+1 records
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["acceptance_rate"] <= 1.0


def test_mlpmcmc_json_telescopes(tmp_path):
    cfgfile = _write_cfg(
        tmp_path,
        "[model]\nkind = ssm\n"
        "[data]\nsource = synthetic\nt = 3\ndata_level = 3\n"
        "[inference]\nn_particles = 8\nepsilon = 0.45\nm_min = 5\npilot_tune = false\n",
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--seed", 2, "--out", out, "mlpmcmc"]) == 0
    doc = json.loads((out / "mlpmcmc.json").read_text())
    for name, est in doc["estimates"].items():
        assert est["value"] == pytest.approx(sum(est["per_level_increments"]), abs=1e-12)
    alloc = doc["allocation"]
    assert len(alloc["M"]) == alloc["L"] - alloc["base_level"] + 1
    for l in range(alloc["base_level"], alloc["L"] + 1):
        assert (out / f"chain_l{l}.csv").exists()
    assert (out / "param_means.csv").exists()


def test_analyze_returns_outputs(tmp_path):
    prices = tmp_path / "p.csv"
    rng = np.random.default_rng(0)
    vals = 100 * np.exp(np.cumsum(rng.standard_normal(60) * 0.01))
    prices.write_text("price\n" + "\n".join(f"{v:.12f}" for v in vals) + "\n")
    cfgfile = _write_cfg(
        tmp_path,
        f"[data]\nsource = csv\npath = {prices}\n[returns]\nmax_lag = 5\n",
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--out", out, "analyze-returns"]) == 0
    stats_lines = (out / "returns_stats.csv").read_text().splitlines()
    assert stats_lines[1] == "mean,variance,skewness,kurtosis,n"
    lag_lines = (out / "lag_correlation.csv").read_text().splitlines()
    assert len(lag_lines) == 2 + 11  # comment + header + 2*5+1 lags


def test_env_overrides(tmp_path, monkeypatch):
    cfgfile = _write_cfg(
        tmp_path, "[data]\nsource = synthetic\nt = 8\ndata_level = 2\n[seeds]\nroot = 3\n"
    )
    out_env = tmp_path / "from_env"
    monkeypatch.setenv("SVEMC_SEED", "41")
    monkeypatch.setenv("SVEMC_OUT", str(out_env))
    assert run_cli(["--config", cfgfile, "simulate"]) == 0
    echo = json.loads((out_env / "resolved_config.json").read_text())
    assert echo["seed"] == 41  # env beats the config file's root = 3
    # flag beats env
    out_flag = tmp_path / "from_flag"
    assert run_cli(["--config", cfgfile, "--seed", 7, "--out", out_flag, "simulate"]) == 0
    assert json.loads((out_flag / "resolved_config.json").read_text())["seed"] == 7


def test_pmcmc_outputs_byte_deterministic(tmp_path):
    cfgfile = _write_cfg(
        tmp_path,
        "[model]\nkind = ssm\n"
        "[data]\nsource = synthetic\nt = 3\ndata_level = 2\n"
        "[inference]\nn_particles = 8\nm_iterations = 5\nlevel = 1\npilot_tune = false\n",
    )
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run_cli(["--config", cfgfile, "--seed", 13, "--out", out, "pmcmc"]) == 0
        outs.append((out / "chain.csv").read_bytes())
    assert outs[0] == outs[1]


def test_cli_error_exit_code(tmp_path, capsys):
    cfgfile = _write_cfg(tmp_path, "[model]\nh = 0.9\n")
    code = run_cli(["--config", cfgfile, "--out", tmp_path / "o", "simulate"])
    assert code == 1
    err = capsys.readouterr().err
    assert "H must lie in [0, 0.5)" in err


def test_rate_study_csv_layout(tmp_path):
    cfgfile = _write_cfg(
        tmp_path,
        "[model]\nkind = ssm\n"
        "[data]\nsource = synthetic\nt = 2\ndata_level = 3\n"
        "[inference]\nn_particles = 6\nm_min = 4\npilot_tune = false\n"
        "[rate_study]\nepsilons = 0.45, 0.3\nreplicates = 2\nbatches = 2\n"
        "m_min_single = 4\nreference_m = 30\nreference_level = 2\n",
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--seed", 5, "--out", out, "rate-study"]) == 0
    lines = (out / "rate_slopes.csv").read_text().splitlines()
    assert lines[1] == "parameter,pmcmc,mlpmcmc"
    assert len(lines) == 2 + 4  # one row per SSM parameter
    assert (out / "rate_points.csv").exists()
    assert (out / "rate_runs.csv").exists()


def test_predict_outputs(tmp_path):
    cfgfile = _write_cfg(
        tmp_path,
        "[model]\nkind = sv\n"
        "[data]\nsource = synthetic\nt = 12\ndata_level = 3\n"
        "[inference]\nn_particles = 20\nepsilon = 0.45\nm_min = 30\npilot_tune = true\n"
        "pilot_rounds = 3\npilot_iters = 30\n"
        "[predict]\nn_draws = 10\nmax_lag = 4\nt_pred = 20\nsim_level = 2\n",
    )
    out = tmp_path / "o"
    assert run_cli(["--config", cfgfile, "--seed", 6, "--out", out, "predict"]) == 0
    stats_lines = (out / "predictive_stats.csv").read_text().splitlines()
    assert stats_lines[1] == "mean,variance,skewness,kurtosis,n"
    curve = (out / "predictive_lag_correlation.csv").read_text().splitlines()
    assert len(curve) == 2 + 9
