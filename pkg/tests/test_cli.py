import json

import numpy as np
import pytest

from drorecode.cli import (EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, EXIT_SOLVER, ConfigError, RunConfig,
                           load_config, main)
from drorecode.dro import read_policy
from drorecode.rank_model import ChannelModel, rank_transition

SMALL = {"H": 2, "links": [1, 2], "T": 2, "N": 8, "L": 300, "sample_sizes": [8]}


@pytest.fixture
def samples_file(tmp_path):
    rng = np.random.default_rng(11)
    s = rng.choice(17, size=15, p=rank_transition(ChannelModel(0.2, 16), 16, 16.0))
    path = tmp_path / "samples.txt"
    path.write_text("\n".join(str(x) for x in s) + "\n")
    return path


def parse_summary(out):
    return dict(line.split(" ", 1) for line in out.strip().splitlines())


def test_solve_defaults(tmp_path, samples_file, capsys):
    out = tmp_path / "policy.txt"
    assert main(["solve", str(samples_file), "--out", str(out), "--set", "L=2000"]) == EXIT_OK
    summary = parse_summary(capsys.readouterr().out)
    assert {"rho", "objective", "worst_case_expectation", "iterations"} <= set(summary)
    t = read_policy(out)
    assert t.size == 17
    assert len(out.read_text().splitlines()) == 18
    assert float(summary["worst_case_expectation"]) <= 16.0 + 1e-4


def test_solve_rho_zero_matches_saa_lp(tmp_path, samples_file, capsys):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert main(["solve", str(samples_file), "--out", str(a), "--rho", "0"]) == EXIT_OK
    assert main(["solve", str(samples_file), "--out", str(b), "--method", "saa-lp"]) == EXIT_OK
    capsys.readouterr()
    np.testing.assert_allclose(read_policy(a), read_policy(b), atol=1e-3)


def test_solve_errors(tmp_path, samples_file, capsys):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert main(["solve", str(empty)]) == EXIT_CONFIG
    bad = tmp_path / "bad.txt"
    bad.write_text("3\nx\n")
    assert main(["solve", str(bad)]) == EXIT_CONFIG
    bad.write_text("3\n40\n")
    assert main(["solve", str(bad)]) == EXIT_CONFIG
    assert main(["solve", str(samples_file), "--set", "colour=1"]) == EXIT_CONFIG
    assert "colour" in capsys.readouterr().err
    assert main(["solve", str(samples_file), "--rho", "-1"]) == EXIT_CONFIG
    assert main(["solve"]) == EXIT_CONFIG
    out = tmp_path / "p.txt"
    assert main(["solve", str(samples_file), "--out", str(out), "--rho", "0.3",
                 "--set", "max_iter=5"]) == EXIT_SOLVER


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    for bad in ({"M": 0}, {"eta": 1.0}, {"loss_rate": 1.0}, {"links": [11]}, {"experiment": "fig3"},
                {"N": "15"}, {"loss_rates": [0.1]}, {"t0": -1.0}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict(bad)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"N": 20, "eta": 0.9}))
    cfg = load_config(str(path), ["seed=7", "loss_rates=[0.1,0.2,0.3]", "H=3", "links=[1,3]"])
    assert (cfg.N, cfg.eta, cfg.seed, cfg.H) == (20, 0.9, 7, 3)
    assert cfg.network().loss_rates == [0.1, 0.2, 0.3]
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(path))
    with pytest.raises(ConfigError):
        load_config(None, ["novalue"])


def test_calibrate_repeated_sample(tmp_path, capsys):
    path = tmp_path / "s.txt"
    path.write_text("7\n" * 15)
    assert main(["calibrate", str(path), "--set", "L=500"]) == EXIT_OK
    out = parse_summary(capsys.readouterr().out)
    assert float(out["rho"]) == 0.0


def test_calibrate_reproducible_and_stable(samples_file, capsys):
    rhos = []
    for L in (10_000, 10_000, 20_000):
        assert main(["calibrate", str(samples_file), "--set", f"L={L}"]) == EXIT_OK
        rhos.append(float(parse_summary(capsys.readouterr().out)["rho"]))
    assert rhos[0] == rhos[1]
    assert abs(rhos[2] - rhos[0]) <= 0.05 * rhos[0]


def run_experiment(tmp_path, name, select, extra=()):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / name
    code = main(["experiment", "--config", str(cfg), "--select", select, "--output-dir", str(out), *extra])
    return code, out


def test_fig1_outputs_and_determinism(tmp_path, capsys):
    code, out = run_experiment(tmp_path, "a", "fig1")
    assert code == EXIT_OK
    assert sorted(p.name for p in out.glob("*.csv")) == ["fig1_link1.csv", "fig1_link2.csv"]
    code, out2 = run_experiment(tmp_path, "b", "fig1")
    for name in ("fig1_link1.csv", "fig1_link2.csv"):
        assert (out / name).read_bytes() == (out2 / name).read_bytes()
    manifest = json.loads((out / "manifest.json").read_text())
    cfg = RunConfig.from_dict(manifest["config"])
    assert cfg.to_dict() == manifest["config"]
    assert cfg.digest() == manifest["config_sha256"]
    assert manifest["seed"] == 0 and manifest["failures"] == []
    assert manifest["version"]


def test_fig1_default_links_give_four_files(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 1, "N": 5, "L": 200, "sample_sizes": [5]}))
    out = tmp_path / "f1"
    assert main(["experiment", "--config", str(cfg), "--output-dir", str(out)]) == EXIT_OK
    assert sorted(p.name for p in out.glob("*.csv")) == [f"fig1_link{k}.csv" for k in (1, 10, 4, 7)]


def test_fig2_outputs(tmp_path, capsys):
    code, out = run_experiment(tmp_path, "c", "fig2")
    assert code == EXIT_OK
    assert sorted(p.name for p in out.glob("*.csv")) == ["fig2_tavg16.csv", "fig2_tavg20.csv"]


def test_partial_failure_exit(tmp_path, capsys):
    code, out = run_experiment(tmp_path, "d", "fig1", ["--set", "max_iter=5"])
    assert code == EXIT_PARTIAL
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failures"]
    assert {f["method"] for f in manifest["failures"]} <= {"SAA-LP", "DRO"}
