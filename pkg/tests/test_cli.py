"""Tests for the command-line front end."""

import csv
import json
from importlib import resources

import jsonschema
import numpy as np
import pytest
from referencing import Registry, Resource

from cyclo_lms.cli import EXIT_DIVERGED, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, main
from cyclo_lms.lms_sim import run_trial
from cyclo_lms.scenarios import example2_config, from_config, scalar_gaussian_config


def load_schema(name):
    with resources.files("cyclo_lms").joinpath("schemas", name).open(encoding="utf-8") as f:
        return json.load(f)


def validator(name):
    registry = Registry()
    for ref in ("manifest.schema.json",):
        schema = load_schema(ref)
        registry = registry.with_resource(schema["$id"], Resource.from_contents(schema))
    schema = load_schema(name)
    return jsonschema.Draft202012Validator(schema, registry=registry)


def read_csv(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0].startswith("# manifest: ")
    manifest = json.loads(lines[0][len("# manifest: ") :])
    rows = list(csv.reader(lines[1:]))
    return manifest, rows[0], rows[1:]


def write_config(tmp_path, cfg, name="toy.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def passthrough_config():
    taps = [[0.8, 0.1], [-0.3, 0.4], [0.2, 0.0]]
    return {
        "schema_version": 1,
        "name": "passthrough",
        "M": 3,
        "periods": {"N_x": 1, "N_h": 1, "N_v": 1},
        "model": {"kind": "gaussian", "covariance": {"scale": 1.0, "decay": 0.5}},
        "ground_truth": {"kind": "constant", "taps": taps},
        "noise": {"kind": "constant", "value": 0.0},
        "initial_filter": taps,
    }


@pytest.fixture(autouse=True)
def fixed_clock(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


class TestAnalyze:
    """Theoretical curves and steady-state tables."""

    def test_tables_and_columns(self, tmp_path):
        code = main(["analyze", "--scenario", "example1", "--mu", "0.01", "--horizon", "4000", "--out", str(tmp_path)])
        assert code == EXIT_OK
        _, header, rows = read_csv(tmp_path / "theory.csv")
        assert header == ["n", "mu", "theory_mse"]
        assert len(rows) == 4000
        _, ss_header, ss_rows = read_csv(tmp_path / "steady_state.csv")
        assert ss_header == ["k", "mu", "xi_k", "ta_mse", "status"]
        assert len(ss_rows) == 40 and all(r[4] == "stable" for r in ss_rows)

    def test_curve_settles_on_steady_state(self, tmp_path):
        main(["analyze", "--scenario", "example1", "--mu", "0.01", "--horizon", "4000", "--out", str(tmp_path)])
        _, _, rows = read_csv(tmp_path / "theory.csv")
        _, _, ss_rows = read_csv(tmp_path / "steady_state.csv")
        xi = np.array([float(r[2]) for r in ss_rows])
        tail = np.array([float(r[2]) for r in rows[-40:]])
        phases = np.array([int(r[0]) for r in rows[-40:]]) % 40
        np.testing.assert_allclose(tail, xi[phases], rtol=1e-6)

    def test_unstable_step_is_reported(self, tmp_path):
        code = main(["analyze", "--scenario", "scalar_gaussian", "--mu", "1.5", "--horizon", "20", "--out", str(tmp_path)])
        assert code == EXIT_OK
        _, _, rows = read_csv(tmp_path / "steady_state.csv")
        assert rows == [["", "1.5", "", "", "unstable"]]

    def test_json_output_validates(self, tmp_path):
        main(["analyze", "--scenario", "scalar_gaussian", "--horizon", "50", "--format", "json", "--out", str(tmp_path)])
        v = validator("table.schema.json")
        for name in ("theory.json", "steady_state.json"):
            doc = json.loads((tmp_path / name).read_text())
            v.validate(doc)
            assert doc["columns"] == load_schema("table.schema.json")["tables"][name.split(".")[0]]

    def test_stdout_when_no_directory(self, capsys):
        assert main(["analyze", "--scenario", "scalar_gaussian", "--mu", "0.1", "--horizon", "3"]) == EXIT_OK
        out = capsys.readouterr().out
        assert out.count("# manifest: ") == 2
        assert "n,mu,theory_mse" in out


class TestSimulate:
    """Monte Carlo tables."""

    def test_single_trial_reproduces_trace(self, tmp_path):
        args = ["simulate", "--scenario", "example2", "--mu", "0.005", "--horizon", "200", "--trials", "1", "--seed", "9"]
        assert main([*args, "--out", str(tmp_path)]) == EXIT_OK
        _, header, rows = read_csv(tmp_path / "empirical.csv")
        assert header == ["n", "mu", "emp_mse", "stderr", "n_diverged"]
        err2, _ = run_trial(from_config(example2_config()), 0.005, 200, seed=9)
        np.testing.assert_array_equal([float(r[2]) for r in rows], err2)

    def test_seed_change_changes_bytes(self, tmp_path):
        base = ["simulate", "--scenario", "example1", "--mu", "0.01", "--horizon", "100", "--trials", "20"]
        main([*base, "--seed", "1", "--out", str(tmp_path / "a")])
        main([*base, "--seed", "2", "--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "empirical.csv").read_bytes()
        b = (tmp_path / "b" / "empirical.csv").read_bytes()
        assert a != b
        ma = np.array([float(r[2]) for r in read_csv(tmp_path / "a" / "empirical.csv")[2]])
        mb = np.array([float(r[2]) for r in read_csv(tmp_path / "b" / "empirical.csv")[2]])
        assert abs(ma.mean() - mb.mean()) / ma.mean() < 0.2

    def test_all_diverged_exit_code(self, tmp_path):
        args = ["simulate", "--scenario", "scalar_gaussian", "--mu", "4", "--horizon", "2000", "--trials", "5"]
        assert main([*args, "--out", str(tmp_path)]) == EXIT_DIVERGED

    def test_zero_trials_is_usage_error(self, tmp_path):
        args = ["simulate", "--scenario", "example1", "--trials", "0", "--out", str(tmp_path)]
        assert main(args) == EXIT_USAGE


class TestReplay:
    """Manifest replay reproduces outputs byte for byte."""

    @pytest.mark.parametrize(
        "args,output",
        [
            (["analyze", "--scenario", "example2", "--mu", "0.005,0.01", "--horizon", "300"], "theory.csv"),
            (["simulate", "--scenario", "example1", "--mu", "0.04", "--horizon", "150", "--trials", "30", "--seed", "4"], "empirical.csv"),
            (["stability", "--scenario", "scalar_gaussian", "--grid", "0.01:2:0.01"], "stability.json"),
            (["analyze", "--scenario", "scalar_gaussian", "--horizon", "40", "--format", "json"], "theory.json"),
        ],
    )
    def test_replay_is_bit_identical(self, tmp_path, monkeypatch, args, output):
        main([*args, "--out", str(tmp_path / "first")])
        monkeypatch.setenv("SOURCE_DATE_EPOCH", "1800000000")
        command = args[0]
        manifest = tmp_path / "first" / output
        main([command, "--manifest", str(manifest), "--out", str(tmp_path / "second")])
        for f in (tmp_path / "first").iterdir():
            assert f.read_bytes() == (tmp_path / "second" / f.name).read_bytes(), f.name

    def test_manifest_validates(self, tmp_path):
        main(["simulate", "--scenario", "example1", "--horizon", "20", "--trials", "2", "--out", str(tmp_path)])
        manifest, _, _ = read_csv(tmp_path / "empirical.csv")
        validator("manifest.schema.json").validate(manifest)
        assert manifest["parameters"] == {"mu": [0.01, 0.04], "horizon": 20, "trials": 2, "seed": 1}

    def test_command_mismatch(self, tmp_path):
        main(["analyze", "--scenario", "scalar_gaussian", "--horizon", "5", "--out", str(tmp_path)])
        assert main(["simulate", "--manifest", str(tmp_path / "theory.csv")]) == EXIT_USAGE

    def test_unreadable_manifest(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("n,mu\n")
        assert main(["analyze", "--manifest", str(bad)]) == EXIT_USAGE
        assert main(["analyze", "--manifest", str(tmp_path / "missing.csv")]) == EXIT_USAGE


class TestStability:
    """Step-size thresholds report."""

    def test_scalar_toy(self, tmp_path):
        cfg = write_config(tmp_path, scalar_gaussian_config(variance=2.0))
        code = main(["stability", "--scenario", cfg, "--mu", "0.1,0.6", "--grid", "0.001:2:0.001", "--out", str(tmp_path)])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "stability.json").read_text())
        validator("stability_report.schema.json").validate(doc)
        t = doc["thresholds"]
        assert abs(t["mu_ms_threshold"] - 0.5) <= doc["grid_resolution"]
        assert all(doc["ordering"].values())
        assert [p["ms_stable"] for p in doc["per_mu"]] == [True, False]

    def test_example1_ordering(self, tmp_path):
        main(["stability", "--scenario", "example1", "--out", str(tmp_path)])
        doc = json.loads((tmp_path / "stability.json").read_text())
        validator("stability_report.schema.json").validate(doc)
        t = doc["thresholds"]
        assert doc["ordering"]["ms_sufficient_le_threshold"]
        assert t["mu_ms_sufficient"] <= t["mu_ms_threshold"]
        assert len(doc["per_mu"][0]["rho_psi"]) == 40

    def test_bad_grid(self):
        with pytest.raises(SystemExit) as info:
            main(["stability", "--scenario", "example1", "--grid", "1:0.5:0.1"])
        assert info.value.code == EXIT_USAGE


class TestCompare:
    """Merged theory and simulation with agreement summary."""

    def test_example1_agreement(self, tmp_path):
        args = ["compare", "--scenario", "example1", "--mu", "0.01", "--horizon", "600", "--trials", "300", "--seed", "3"]
        assert main([*args, "--out", str(tmp_path)]) == EXIT_OK
        summary = json.loads((tmp_path / "summary.json").read_text())
        validator("compare_summary.schema.json").validate(summary)
        assert summary["agreement"]["0.01"]["pct_within_4stderr"] >= 95.0
        _, header, rows = read_csv(tmp_path / "compare.csv")
        assert header == ["n", "mu", "theory_mse", "emp_mse", "stderr"]
        assert len(rows) == 600

    def test_passthrough_is_zero(self, tmp_path):
        cfg = write_config(tmp_path, passthrough_config())
        args = ["compare", "--scenario", cfg, "--mu", "0.1", "--horizon", "50", "--trials", "10", "--out", str(tmp_path)]
        assert main(args) == EXIT_OK
        _, _, rows = read_csv(tmp_path / "compare.csv")
        theory = np.array([float(r[2]) for r in rows])
        emp = np.array([float(r[3]) for r in rows])
        assert np.max(theory) < 1e-28 and np.max(emp) < 1e-28
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["agreement"]["0.1"]["pct_within_4stderr"] == 100.0

    def test_unstable_step_is_numerical_failure(self, tmp_path):
        args = ["compare", "--scenario", "scalar_gaussian", "--mu", "1.5", "--horizon", "20", "--trials", "2"]
        assert main([*args, "--out", str(tmp_path)]) == EXIT_NUMERICAL


class TestUsage:
    def test_unknown_scenario(self, capsys):
        assert main(["analyze", "--scenario", "nope"]) == EXIT_USAGE
        assert "unknown scenario" in capsys.readouterr().err

    def test_missing_scenario(self):
        assert main(["analyze"]) == EXIT_USAGE

    def test_invalid_config_file(self, tmp_path):
        cfg = scalar_gaussian_config()
        cfg["extra"] = True
        assert main(["analyze", "--scenario", write_config(tmp_path, cfg)]) == EXIT_USAGE

    @pytest.mark.parametrize("mu", ["abc", "-0.1", "0"])
    def test_bad_step_sizes(self, mu):
        with pytest.raises(SystemExit) as info:
            main(["analyze", "--scenario", "example1", "--mu", mu])
        assert info.value.code == EXIT_USAGE

    def test_non_positive_horizon(self):
        assert main(["analyze", "--scenario", "scalar_gaussian", "--horizon", "0"]) == EXIT_USAGE
