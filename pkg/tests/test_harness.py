import csv
import json
import math
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import norm

from insider_donsker import donsker as dk
from insider_donsker.errors import ConfigError
from insider_donsker.harness import cli, config, runs

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
FIXTURES = Path(__file__).resolve().parent / "fixtures"
FLOAT17 = re.compile(r"^-?\d\.\d{16}e[+-]\d+$|^-?\d+(\.\d+)?(e[+-]?\d+)?$|^nan$|^-?inf$")


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def cfg_from(user, tmp_path, **kw):
    user = {"schema_version": 1, "seed": 5, **user}
    return config.build(user, out=tmp_path, **kw)


# -- configuration --------------------------------------------------------------------


def test_missing_seed_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="seed"):
        config.build({"schema_version": 1}, out=tmp_path)
    assert config.build({"schema_version": 1}, seed=3, out=tmp_path).seed == 3


def test_seed_flag_overrides_config(tmp_path):
    assert cfg_from({}, tmp_path, seed=99).seed == 99


@pytest.mark.parametrize(
    "user",
    [
        {"n_pahts": 10},
        {"market": {"sigma": 0.2}},
        {"markets": {"b0": 0.1}},
        {"schema_version": 2},
        {"insider": {"kind": "levy"}},
        {"market": {"T": 2.0}},
        {"grid": {"steps": 0}},
        {"donsker": {"variance_floor": -1.0}},
        {"utility": {"kind": "power", "rho": 1.0}},
    ],
)
def test_bad_configs_are_rejected(user, tmp_path):
    with pytest.raises(ConfigError):
        cfg_from(user, tmp_path)


def test_load_reports_toml_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = = 1\n")
    with pytest.raises(ConfigError, match="invalid TOML"):
        config.load(bad)
    with pytest.raises(ConfigError, match="cannot read"):
        config.load(tmp_path / "missing.toml")


def test_shipped_configs_load():
    for path in CONFIGS.glob("*.toml"):
        assert config.load(path).seed is not None


def test_every_default_is_documented_in_readme():
    text = (ROOT / "README.md").read_text()
    for section, keys in config.DEFAULTS.items():
        for key in keys:
            assert f"`{key}`" in text, (section, key)


# -- emission --------------------------------------------------------------------------


def test_float_format_round_trips():
    rng = np.random.default_rng(0)
    for v in rng.standard_normal(200) * 10.0 ** rng.integers(-30, 30, 200):
        assert float(runs.fmt(v)) == v
    assert runs.fmt(0.1) == "0.10000000000000001"
    assert runs.fmt(True) == "true" and runs.fmt(np.int64(3)) == "3"


def test_json_is_strict(tmp_path):
    runs.write_json(tmp_path / "a.json", {"x": math.nan, "y": np.float64(1.5), "z": [np.inf]})
    obj = json.loads((tmp_path / "a.json").read_text(), parse_constant=lambda s: pytest.fail(s))
    assert obj == {"x": None, "y": 1.5, "z": [None]}


# -- density ------------------------------------------------------------------------------


def test_density_gaussian_reproduces_normal_pdf(tmp_path):
    cfg = cfg_from({"density": {"times": [0.0, 0.25, 0.5]}}, tmp_path)
    summary = runs.run_density(cfg)
    rows = read_csv(tmp_path / "density.csv")
    assert rows[0] == ["t", "y", "m", "phi", "imag_residual"]
    data = np.array(rows[1:], dtype=float)
    at0 = data[data[:, 0] == 0.0]
    np.testing.assert_allclose(at0[:, 2], norm.pdf(at0[:, 1]), rtol=1e-9, atol=1e-15)
    for t, mass in summary["riemann_mass_by_t"].items():
        assert 0.999 <= mass <= 1.001, t
        sel = data[:, 0] == float(t)
        assert 0.999 <= data[sel, 2].sum() * (data[sel, 1][1] - data[sel, 1][0]) <= 1.001


def test_density_bp_matches_golden_file(tmp_path):
    cfg = config.load(CONFIGS / "brownian_poisson.toml", out=tmp_path)
    runs.run_density(cfg)
    assert (tmp_path / "density.csv").read_bytes() == (FIXTURES / "bp_density_golden.csv").read_bytes()


def test_density_bp_rows_match_module_values(tmp_path):
    cfg = config.load(CONFIGS / "brownian_poisson.toml", out=tmp_path)
    runs.run_density(cfg)
    rows = read_csv(tmp_path / "density.csv")
    assert rows[0] == ["t", "y", "m", "phi", "psi_1", "imag_residual"]
    data = np.array(rows[1:], dtype=float)
    for t in np.unique(data[:, 0]):
        sel = data[data[:, 0] == t]
        m, phi, psi, imag = dk.density_triple(cfg.insider, t, sel[:, 1], np.zeros(len(sel)), cfg.quad)
        # ratios are NaN where m is below the density floor
        for col, ref in ((2, m), (3, phi), (4, psi[:, 0]), (5, imag)):
            assert np.array_equal(sel[:, col], ref, equal_nan=True)


def test_density_error_carries_context(tmp_path):
    cfg = cfg_from({"donsker": {"variance_floor": 10.0}, "density": {"times": [0.5]}}, tmp_path)
    with pytest.raises(Exception, match=r"t=0\.5"):
        runs.run_density(cfg)


# -- policy and foc ------------------------------------------------------------------------


def test_policy_csv_matches_closed_form(tmp_path):
    cfg = config.load(CONFIGS / "default.toml", out=tmp_path)
    runs.run_policy(cfg)
    rows = read_csv(tmp_path / "policy.csv")
    assert rows[0] == ["t", "y", "y_t", "m", "phi", "pi", "foc_residual", "admissibility_margin", "status"]
    for r in rows[1:]:
        t, y, yt = map(float, r[:3])
        assert float(r[5]) == pytest.approx(0.1 / 0.04 + (y - yt) / (0.2 * (1.0 - t)), rel=1e-8)
        assert r[-1] == "converged"


def test_foc_csv(tmp_path):
    cfg = config.load(CONFIGS / "brownian_poisson.toml", out=tmp_path)
    runs.run_foc(cfg)
    rows = read_csv(tmp_path / "foc.csv")
    assert rows[0] == ["phi", "psi", "pi", "foc_residual", "admissibility_margin", "hamiltonian_grad", "status"]
    assert len(rows) == 10
    for r in rows[1:]:
        assert float(r[3]) < 1e-10 and abs(float(r[5])) < 1e-10 and r[6] == "converged"


# -- simulate -----------------------------------------------------------------------------


SIM = {"n_paths": 400, "grid": {"steps": 64}}


def test_simulate_outputs(tmp_path):
    cfg = cfg_from(SIM, tmp_path)
    summary = runs.run_simulate(cfg)
    rows = read_csv(tmp_path / "simulate.csv")
    assert rows[0] == ["path", "realized_Y", "x_insider", "x_merton", "u_insider", "u_merton"]
    assert len(rows) == 401 and [int(r[0]) for r in rows[1:]] == list(range(400))
    for r in rows[1:]:
        for cell in r[1:]:
            assert FLOAT17.match(cell), cell
    data = np.array(rows[1:], dtype=float)
    assert np.allclose(data[:, 4], np.log(data[:, 2])) and np.allclose(data[:, 5], np.log(data[:, 3]))
    assert summary["advantage"] == pytest.approx(np.mean(data[:, 4] - data[:, 5]), rel=1e-12)


def test_simulate_zero_edge_has_zero_advantage(tmp_path):
    cfg = cfg_from({**SIM, "simulate": {"policy": "merton"}}, tmp_path)
    s = runs.run_simulate(cfg)
    assert s["advantage"] == 0.0 and abs(s["advantage"]) <= 3 * s["advantage_se"]


def test_simulate_se_scales_with_paths(tmp_path):
    s1 = runs.run_simulate(cfg_from({**SIM, "n_paths": 2000}, tmp_path / "a"))
    s2 = runs.run_simulate(cfg_from({**SIM, "n_paths": 4000}, tmp_path / "b"))
    assert s1["advantage_se"] / s2["advantage_se"] == pytest.approx(math.sqrt(2), rel=0.1)


def test_simulate_is_chunk_independent(tmp_path, monkeypatch):
    a = runs.simulate_arms(cfg_from(SIM, tmp_path))
    monkeypatch.setattr(runs, "PATH_CHUNK", 37)
    b = runs.simulate_arms(cfg_from(SIM, tmp_path))
    for u, v in zip(a, b):
        assert np.array_equal(u, v)


def test_simulate_bp_config_runs(tmp_path):
    s = runs.run_simulate(config.load(CONFIGS / "brownian_poisson.toml", out=tmp_path, n_paths=50))
    assert s["n_paths"] == 50 and math.isfinite(s["advantage"])


# -- solve-c --------------------------------------------------------------------------------


def test_solve_c_csv(tmp_path):
    cfg = cfg_from({"n_paths": 500, "grid": {"steps": 64}, "solve_c": {"y": [-1.0, 0.0, 1.0]}}, tmp_path)
    runs.run_solve_c(cfg)
    rows = read_csv(tmp_path / "solve_c.csv")
    assert rows[0] == ["y", "c", "budget", "budget_se", "iterations", "feasible"]
    for r in rows[1:]:
        assert abs(float(r[2]) - 1.0) < 1e-8 and r[5] == "true"


# -- verify and the CLI ------------------------------------------------------------------------


def test_verify_default_all_pass(tmp_path):
    cfg = config.load(CONFIGS / "default.toml", out=tmp_path)
    from insider_donsker.harness.verify import run_verify

    report = run_verify(cfg)
    assert report["passed"], [c for c in report["checks"] if not c["passed"]]
    names = {c["module"] for c in report["checks"]}
    assert names == {"quadrature", "donsker", "market", "portfolio", "adjoint", "harness"}
    for c in report["checks"]:
        assert {"name", "module", "measured", "threshold", "passed"} <= set(c)


def test_verify_forced_failure(tmp_path, capsys):
    code = cli.main(["verify", "--config", str(CONFIGS / "bad_variance_floor.toml"), "--out", str(tmp_path)])
    assert code == 1
    text = (tmp_path / "verify_report.json").read_text()
    report = json.loads(text, parse_constant=lambda s: pytest.fail(s))
    assert not report["passed"]
    assert any("DegenerateVariance" in c.get("error", "") for c in report["checks"])
    out = capsys.readouterr().out
    assert "FAIL" in out


def test_cli_exit_codes(tmp_path, capsys):
    cfgfile = tmp_path / "c.toml"
    cfgfile.write_text("schema_version = 1\nseed = 1\n[market]\nsigma = 1.0\n")
    assert cli.main(["density", "--config", str(cfgfile)]) == 2
    cfgfile.write_text("schema_version = 1\n")
    assert cli.main(["density", "--config", str(cfgfile)]) == 2
    cfgfile.write_text("schema_version = 1\nseed = 1\n[donsker]\nvariance_floor = 10.0\n[density]\ntimes=[0.5]\n")
    assert cli.main(["density", "--config", str(cfgfile), "--out", str(tmp_path / "o")]) == 3
    cfgfile.write_text("schema_version = 1\nseed = 1\n[density]\ntimes=[0.0]\n")
    assert cli.main(["density", "--config", str(cfgfile), "--out", str(tmp_path / "o")]) == 0
    with pytest.raises(SystemExit):
        cli.main(["nonsense", "--config", str(cfgfile)])


def test_cli_paths_flag(tmp_path):
    cfgfile = tmp_path / "c.toml"
    cfgfile.write_text("schema_version = 1\nseed = 1\nn_paths = 5\n[grid]\nsteps = 16\n")
    assert cli.main(["simulate", "--config", str(cfgfile), "--out", str(tmp_path), "--paths", "7"]) == 0
    assert len(read_csv(tmp_path / "simulate.csv")) == 8


def test_module_entry_point(tmp_path):
    cfgfile = tmp_path / "c.toml"
    cfgfile.write_text("schema_version = 1\nseed = 1\n[density]\ntimes=[0.0]\n")
    proc = subprocess.run(
        [sys.executable, "-m", "insider_donsker", "density", "--config", str(cfgfile), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0 and json.loads(proc.stdout)["rows"] == 401
