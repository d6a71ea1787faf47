import io
import json

import numpy as np
import pytest

from vrkf.adaptive_estimator import AdaptiveEstimator
from vrkf.exceptions import ConfigError, DimensionError, LossError
from vrkf.experiment import PANEL_DIR
from vrkf.experiments import Example1
from vrkf.filters import (ChannelConfig, FilterConfig, build_estimator, load_filter_configs, load_model_config,
                          read_rows, stream_filter)
from vrkf.kalman_estimator import KalmanEstimator
from vrkf.robust_estimator import RobustEstimator
from vrkf.statespace import FixedGaussian, simulate
from vrkf.variational_estimator import VariationalEstimator, VariationalFixedEstimator

AR2 = {"name": "AR2", "estimator": "ar2",
       "process": {"nu": 1e8, "rho": 1.0},
       "measurement": {"kind": "StudentLog", "nu": 50.0, "tau2": 1.0, "rho": 0.98},
       "eta": 0.5}


def _measurement_csv(trajectory, rows=None) -> str:
    lines = ["k,y_1"]
    for k, y in enumerate(trajectory.measurements[:rows], start=1):
        lines.append(f"{k},{float(y[0])!r}")
    return "\n".join(lines) + "\n"


def test_channel_config():
    c = ChannelConfig.from_dict({"kind": "SquareRoot", "nu": 2.0})
    assert c.kind == "square_root" and c.tau2 == 1.0 and c.rho == 1.0
    with pytest.raises(ConfigError):
        ChannelConfig.from_dict({"nu": 2.0, "scale": 1.0})
    with pytest.raises(ConfigError):
        ChannelConfig.from_dict({"rho": 1.5})
    with pytest.raises(LossError):
        ChannelConfig.from_dict({"kind": "huber"})


def test_filter_config_errors():
    with pytest.raises(ConfigError):
        FilterConfig.from_dict({"name": "x"})
    with pytest.raises(ConfigError):
        FilterConfig.from_dict({"estimator": "ekf"})
    with pytest.raises(ConfigError):
        FilterConfig.from_dict({"estimator": "kf", "gain": 1.0})
    with pytest.raises(ConfigError):
        FilterConfig.from_dict({"estimator": "stkf", "m_iter": 0})
    assert FilterConfig.from_dict({"estimator": "vbkf"}).name == "VBKF"


def test_filter_config_dict():
    config = FilterConfig.from_dict(AR2)
    again = FilterConfig.from_dict(config.to_dict())
    assert again == config
    assert json.loads(json.dumps(config.to_dict()))["measurement"]["kind"] == "student_log"


def test_resolve_channels():
    config = FilterConfig.from_dict(AR2)
    channels = config.resolve_channels(2, 1)
    assert [c.nu for c in channels] == [1e8, 1e8, 50.0]
    explicit = FilterConfig.from_dict({"estimator": "stkf", "channels": [{"nu": 1e8}, {"nu": 4.0}]})
    assert [c.nu for c in explicit.resolve_channels(1, 1)] == [1e8, 4.0]
    with pytest.raises(ConfigError):
        explicit.resolve_channels(2, 1)


def test_with_measurement():
    config = FilterConfig.from_dict(AR2).with_measurement(1, rho=0.9, nu=10.0)
    assert config.measurement.rho == 0.9 and config.measurement.nu == 10.0
    assert config.process.nu == 1e8
    explicit = FilterConfig.from_dict({"estimator": "stkf", "channels": [{"nu": 1e8}, {"nu": 1e8}, {"nu": 4.0}]})
    changed = explicit.with_measurement(1, nu=2.0)
    assert [c.nu for c in changed.channels] == [1e8, 1e8, 2.0]
    assert FilterConfig.from_dict(AR2).with_eta(0.25).eta == 0.25


def test_build_estimator(example1_model):
    kinds = {"kf": KalmanEstimator, "stkf": RobustEstimator, "vbkf_fixed": VariationalFixedEstimator,
             "vbkf": VariationalEstimator, "ar1": AdaptiveEstimator, "ar2": AdaptiveEstimator}
    for kind, cls in kinds.items():
        estimator = build_estimator(FilterConfig.from_dict({"estimator": kind}), example1_model)
        assert type(estimator) is cls
        assert estimator.name == kind.upper()
    ar2 = build_estimator(FilterConfig.from_dict(AR2), example1_model, x0=[1.0, 0.0], P0=2.0 * np.eye(2))
    assert ar2.switching.eta == 0.5
    np.testing.assert_array_equal(ar2.hyper.rho, [1.0, 1.0, 0.98])
    np.testing.assert_array_equal(ar2.state.x, [1.0, 0.0])


def test_shipped_panels_build():
    paths = sorted(PANEL_DIR.glob("*.json"))
    assert len(paths) == 6
    model = Example1(case=1).get_model()
    for path in paths:
        configs = load_filter_configs(path)
        assert configs
        if json.loads(path.read_text())["experiment"] != "example3":
            for config in configs:
                build_estimator(config, model)


def test_load_filter_configs(tmp_path):
    assert len(load_filter_configs({"estimator": "kf"})) == 1
    assert len(load_filter_configs([{"estimator": "kf"}, AR2])) == 2
    assert len(load_filter_configs({"filters": [AR2]})) == 1
    with pytest.raises(ConfigError):
        load_filter_configs([])
    with pytest.raises(ConfigError):
        load_filter_configs(tmp_path.joinpath("missing.json"))
    broken = tmp_path.joinpath("broken.json")
    broken.write_text("{")
    with pytest.raises(ConfigError):
        load_filter_configs(broken)


def test_load_model_config(tmp_path):
    model, x0, P0 = load_model_config({"experiment": "example1", "case": 2})
    assert model.n == 2
    np.testing.assert_array_equal(x0, np.zeros(2))
    np.testing.assert_array_equal(P0, np.eye(2))
    path = tmp_path.joinpath("model.json")
    path.write_text(json.dumps({"A": [[1.0]], "C": [[1.0]], "Q": [[1.0]], "R": [[2.0]], "x0": [3.0]}))
    model, x0, P0 = load_model_config(path)
    assert model.R[0, 0] == 2.0
    np.testing.assert_array_equal(x0, [3.0])
    assert P0 is None
    with pytest.raises(ConfigError):
        load_model_config([1, 2])
    with pytest.raises(ConfigError):
        load_model_config({"experiment": "example9"})


def test_read_rows():
    text = "# comment\nk,y_1,u_1\n1,0.5\n2,0.25,1.0\n"
    rows = list(read_rows(io.StringIO(text), m=1, p=1))
    assert [(line, k) for line, k, _, _ in rows] == [(3, 1), (4, 2)]
    assert rows[0][3] is None
    np.testing.assert_array_equal(rows[1][3], [1.0])


@pytest.mark.parametrize("text", ["k,y_1\n1,0.5\n2,abc\n", "k,y_1\n1,0.5\n2,0.1,0.2\n", "k,y_1\n1,0.5\n2,nan\n"])
def test_read_rows_reports_the_line(text):
    with pytest.raises(ConfigError, match="Line 3"):
        list(read_rows(io.StringIO(text), m=1, p=0))


def test_stream_filter_matches_batch(example1_model):
    trajectory = simulate(example1_model, FixedGaussian([[1.0]], maps_through_input=True), FixedGaussian([[0.1]]),
                          100, seed=1)
    batch = KalmanEstimator(example1_model).run(trajectory)
    sink = io.StringIO()
    count = stream_filter(KalmanEstimator(example1_model), io.StringIO(_measurement_csv(trajectory)), sink,
                          header=["test"])
    assert count == 100
    lines = sink.getvalue().splitlines()
    assert lines[0] == "# test"
    assert lines[1] == "k,x_1,x_2,iterations,lambda_1,lambda_2,lambda_3"
    streamed = np.array([[float(v) for v in line.split(",")[1:3]] for line in lines[2:]])
    np.testing.assert_array_equal(streamed, batch.estimates)


def test_stream_filter_switching_columns(example1_model):
    trajectory = simulate(example1_model, FixedGaussian([[1.0]], maps_through_input=True), FixedGaussian([[0.1]]),
                          20, seed=2)
    sink = io.StringIO()
    estimator = build_estimator(FilterConfig.from_dict(AR2), example1_model)
    stream_filter(estimator, io.StringIO(_measurement_csv(trajectory)), sink)
    lines = sink.getvalue().splitlines()
    assert lines[0].split(",")[-3:] == ["reverted_1", "reverted_2", "reverted_3"]
    assert len(lines) == 21
    assert set(lines[1].split(",")[-3:]) <= {"0", "1"}


def test_stream_filter_rejects_wrong_width(example1_model):
    with pytest.raises(ConfigError):
        stream_filter(KalmanEstimator(example1_model), io.StringIO("1,0.1,0.2,0.3\n"), io.StringIO())
    with pytest.raises(DimensionError):
        KalmanEstimator(example1_model).step(np.zeros(2))
