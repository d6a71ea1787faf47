import json

import numpy as np
import pytest

from vrkf.bench import read_results
from vrkf.cli import EXIT_CONFIG, EXIT_OK, main
from vrkf.experiments import Example1
from vrkf.filters import build_estimator
from vrkf.experiment import panel_path


@pytest.fixture
def model_file(tmp_path):
    path = tmp_path.joinpath("model.json")
    path.write_text(json.dumps({"experiment": "example1", "case": 1}))
    return path


@pytest.fixture
def measurement_file(tmp_path):
    trajectory = Example1(case=1, steps=60).simulate(4)
    path = tmp_path.joinpath("y.csv")
    trajectory.to_measurement_csv(path)
    return path, trajectory


def test_run_writes_results(tmp_path, capsys):
    out = tmp_path.joinpath("example1.csv")
    code = main(["run", "--experiment", "example1", "--case", "1", "--steps", "100", "--seeds", "2",
                 "--out", str(out), "-q"])
    assert code == EXIT_OK
    frame = read_results(out)
    assert set(frame["estimator"]) == {"KF", "STKF", "VBKF-fixed"}
    assert "STKF" in capsys.readouterr().out


def test_run_with_panel_subset_and_lambda(tmp_path):
    out = tmp_path.joinpath("r.csv")
    code = main(["run", "--experiment", "example1", "--steps", "50", "--seeds", "1", "--panel", "KF",
                 "--lambda-trace", "--out", str(out), "-q"])
    assert code == EXIT_OK
    assert set(read_results(out)["estimator"]) == {"KF"}
    assert tmp_path.joinpath("r_lambda.csv").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--experiment", "example1", "--case", "9"],
    ["run", "--experiment", "example9"],
    ["run", "--experiment", "example1", "--panel", "EKF", "--steps", "10", "--seeds", "1"],
    ["run", "--experiment", "example1", "--disturbance", "step"],
    ["sweep", "--experiment", "example1", "--param", "nu", "--values", " , "],
    ["sweep", "--experiment", "example1", "--param", "nu", "--values", "1,abc"],
    ["frobnicate"],
])
def test_configuration_errors(argv, tmp_path):
    if argv[0] in ("run", "sweep"):
        argv = argv + ["--out", str(tmp_path.joinpath("x.csv"))]
    assert main(argv) == EXIT_CONFIG


def test_sweep(tmp_path, capsys):
    out = tmp_path.joinpath("sweep.csv")
    code = main(["sweep", "--experiment", "example1", "--case", "2", "--param", "rho", "--values", "0.98,0.99",
                 "--steps", "50", "--seeds", "1", "--out", str(out), "-q"])
    assert code == EXIT_OK
    frame = read_results(out)
    assert list(frame["value"]) == [0.98, 0.99]
    assert "time_constant_steps" in frame.columns
    assert "0.9800" in capsys.readouterr().out


def test_sweep_json_carries_the_config(tmp_path):
    out = tmp_path.joinpath("sweep.json")
    code = main(["sweep", "--experiment", "example1", "--case", "1", "--param", "nu", "--values", "1,10",
                 "--estimator", "STKF", "--steps", "50", "--seeds", "2", "--out", str(out), "--format", "json", "-q"])
    assert code == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["config"]["experiment"] == "example1"
    assert len(doc["config"]["seeds"]) == 2
    assert doc["sweep"]["param"] == "nu"
    assert len(doc["rows"]) == 2


def test_filter_matches_run_mode(tmp_path, model_file, measurement_file):
    path, trajectory = measurement_file
    out = tmp_path.joinpath("filtered.csv")
    code = main(["filter", "--config", str(panel_path("example1", 1)), "--name", "KF", "--model", str(model_file),
                 "--input", str(path), "--output", str(out)])
    assert code == EXIT_OK
    frame = read_results(out)
    assert list(frame.columns[:4]) == ["k", "x_1", "x_2", "iterations"]
    experiment = Example1(case=1)
    config = [c for c in experiment.get_panel() if c.name == "KF"][0]
    batch = build_estimator(config, experiment.get_model()).run(trajectory)
    np.testing.assert_allclose(frame[["x_1", "x_2"]].to_numpy(), batch.estimates, rtol=1e-12, atol=1e-15)


def test_filter_errors(tmp_path, model_file, measurement_file):
    path, _ = measurement_file
    config = str(panel_path("example1", 1))
    assert main(["filter", "--config", config, "--name", "EKF", "--model", str(model_file), "--input", str(path),
                 "--output", str(tmp_path.joinpath("o.csv"))]) == EXIT_CONFIG
    bad = tmp_path.joinpath("bad.csv")
    bad.write_text("k,y_1\n1,0.5\n2,oops\n")
    assert main(["filter", "--config", config, "--model", str(model_file), "--input", str(bad),
                 "--output", str(tmp_path.joinpath("o.csv"))]) == EXIT_CONFIG
    assert main(["filter", "--config", config, "--model", str(model_file),
                 "--input", str(tmp_path.joinpath("missing.csv"))]) == EXIT_CONFIG


def test_bounds(model_file, measurement_file, capsys):
    path, _ = measurement_file
    code = main(["bounds", "--model", str(model_file), "--input", str(path), "--stop", "10",
                 "--config", str(panel_path("example1", 1))])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "worst step" in out
    assert "channel 3" in out
    assert main(["bounds", "--model", str(model_file), "--input", str(path), "--start", "100"]) == EXIT_CONFIG


def test_validate(tmp_path, capsys):
    assert main(["validate"]) == EXIT_OK
    assert capsys.readouterr().out.count("OK") == 6
    bad = tmp_path.joinpath("bad.json")
    bad.write_text(json.dumps([{"estimator": "stkf", "measurement": {"nu": -1.0}}]))
    assert main(["validate", str(bad)]) == EXIT_CONFIG
    model = tmp_path.joinpath("model.json")
    model.write_text(json.dumps({"A": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[1.0]]}))
    assert main(["validate", str(model)]) == EXIT_OK


def test_list(capsys):
    assert main(["list"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "example1 case 1" in out
    assert "example3 case 3" in out
    assert "STKF-AR2" in out


def test_version():
    assert main(["--version"]) == EXIT_OK
