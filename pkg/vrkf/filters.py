import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, TextIO, Tuple, Union

import numpy as np

from vrkf.adaptive_estimator import AdaptiveEstimator, Ar2Config
from vrkf.estimator import ChannelHyper, Estimator
from vrkf.exceptions import ConfigError, VrkfError
from vrkf.kalman_estimator import KalmanEstimator
from vrkf.losses import ChannelLosses, LossKind, RobustLoss
from vrkf.robust_estimator import RobustEstimator
from vrkf.statespace import LinearModel
from vrkf.util import GAUSSIAN_NU
from vrkf.variational_estimator import VariationalEstimator, VariationalFixedEstimator

logger = logging.getLogger(__name__)

ESTIMATOR_KINDS = ("kf", "stkf", "vbkf_fixed", "vbkf", "ar1", "ar2")

# An unconfigured channel is Gaussian with unit scale and no adaptation.
DEFAULT_CHANNEL = {"kind": LossKind.student_log.value, "nu": GAUSSIAN_NU, "tau2": 1.0, "rho": 1.0}


@dataclass
class ChannelConfig:
    kind: str = LossKind.student_log.value
    nu: float = GAUSSIAN_NU
    tau2: float = 1.0
    rho: float = 1.0

    @staticmethod
    def from_dict(d: dict) -> "ChannelConfig":
        unknown = set(d) - {"kind", "nu", "tau2", "rho"}
        if unknown:
            raise ConfigError(f"Unknown channel keys: {', '.join(sorted(unknown))}")
        c = ChannelConfig(**{**DEFAULT_CHANNEL, **d})
        c.kind = LossKind.parse(c.kind).value
        if not c.nu > 0 or not c.tau2 > 0 or not 0 < c.rho <= 1:
            raise ConfigError(f"Invalid channel {d}: need nu > 0, tau2 > 0, 0 < rho <= 1")
        return c

    def to_dict(self) -> dict:
        return {"kind": self.kind, "nu": self.nu, "tau2": self.tau2, "rho": self.rho}


@dataclass
class FilterConfig:
    """
    One estimator of a panel. Channels are given either as a full per-channel list or as one `process` block and
    one `measurement` block broadcast over the n and m channels.
    """

    name: str
    estimator: str
    process: ChannelConfig = field(default_factory=ChannelConfig)
    measurement: ChannelConfig = field(default_factory=ChannelConfig)
    channels: Optional[List[ChannelConfig]] = None
    epsilon: float = 0.01
    m_iter: int = 4
    iterations: int = 4
    eta: float = 1.0
    enabled: Optional[List[bool]] = None

    def __post_init__(self):
        if self.estimator not in ESTIMATOR_KINDS:
            raise ConfigError(f"Not defined: estimator {self.estimator!r}. Valid: {', '.join(ESTIMATOR_KINDS)}")
        if self.epsilon <= 0 or self.m_iter < 1 or self.iterations < 1:
            raise ConfigError(f"{self.name}: epsilon must be positive and iteration counts at least 1")

    @staticmethod
    def from_dict(d: dict) -> "FilterConfig":
        if "estimator" not in d:
            raise ConfigError(f"Filter config is missing 'estimator': {d}")
        unknown = set(d) - {"name", "estimator", "process", "measurement", "channels", "epsilon", "m_iter",
                            "iterations", "eta", "enabled"}
        if unknown:
            raise ConfigError(f"Unknown filter keys: {', '.join(sorted(unknown))}")
        kwargs = dict(d)
        kwargs.setdefault("name", d["estimator"].upper())
        for key in ("process", "measurement"):
            if key in kwargs:
                kwargs[key] = ChannelConfig.from_dict(kwargs[key])
        if kwargs.get("channels") is not None:
            kwargs["channels"] = [ChannelConfig.from_dict(c) for c in kwargs["channels"]]
        try:
            return FilterConfig(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e))

    def to_dict(self) -> dict:
        d = {"name": self.name, "estimator": self.estimator, "process": self.process.to_dict(),
             "measurement": self.measurement.to_dict(), "epsilon": self.epsilon, "m_iter": self.m_iter,
             "iterations": self.iterations, "eta": self.eta}
        if self.channels is not None:
            d["channels"] = [c.to_dict() for c in self.channels]
        if self.enabled is not None:
            d["enabled"] = list(self.enabled)
        return d

    def resolve_channels(self, n: int, m: int) -> List[ChannelConfig]:
        """
        :return: The n + m per-channel settings.
        """

        if self.channels is not None:
            if len(self.channels) != n + m:
                raise ConfigError(f"{self.name}: {len(self.channels)} channels configured for {n} + {m}")
            return list(self.channels)
        return [self.process] * n + [self.measurement] * m

    def with_measurement(self, m: int, **changes) -> "FilterConfig":
        """
        :param m: The number of measurement channels (the last m entries of `channels`).
        :param changes: Channel fields to override.

        :return: A copy with the measurement block (or measurement channels) changed.
        """

        d = self.to_dict()
        d["measurement"].update(changes)
        if "channels" in d:
            for c in d["channels"][len(d["channels"]) - m:]:
                c.update(changes)
        return FilterConfig.from_dict(d)

    def with_eta(self, eta: float) -> "FilterConfig":
        d = self.to_dict()
        d["eta"] = eta
        return FilterConfig.from_dict(d)


def load_filter_configs(source: Union[str, Path, dict, list]) -> List[FilterConfig]:
    """
    :param source: A path to a JSON file, or parsed JSON. Accepts one filter, a list, or a dict with a `panel` list.

    :return: The filter configs.
    """

    if isinstance(source, (str, Path)):
        try:
            source = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read filter config {source}: {e}")
    if isinstance(source, dict):
        source = source.get("panel", source.get("filters", [source]))
    if not isinstance(source, list) or not source:
        raise ConfigError("Expected a non-empty list of filter configs")
    return [FilterConfig.from_dict(d) for d in source]


def load_model_config(source: Union[str, Path, dict]) -> Tuple[LinearModel, Optional[np.ndarray],
                                                               Optional[np.ndarray]]:
    """
    :param source: A path to a JSON file, or parsed JSON. Either {"experiment", "case"} for a registered model or
                   the explicit matrices {"A", "C", "Q", "R", "B_u", "dt"}. Both forms take optional "x0" and "P0".

    :return: Tuple: the model, x0, P0.
    """

    if isinstance(source, (str, Path)):
        try:
            source = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read model config {source}: {e}")
    if not isinstance(source, dict):
        raise ConfigError("A model config must be a JSON object")
    x0 = source.get("x0")
    P0 = source.get("P0")
    if "experiment" in source:
        from vrkf.experiments import get_experiment

        experiment = get_experiment(source["experiment"], case=source.get("case", 1))
        model = experiment.get_model()
        prior_x0, prior_P0 = experiment.get_prior()
        x0 = prior_x0 if x0 is None else x0
        P0 = prior_P0 if P0 is None else P0
    else:
        model = LinearModel.from_dict(source)
    return (model, None if x0 is None else np.asarray(x0, dtype=float),
            None if P0 is None else np.asarray(P0, dtype=float))


def build_estimator(config: FilterConfig, model: LinearModel, x0: np.ndarray = None,
                    P0: np.ndarray = None) -> Estimator:
    """
    :return: A fresh estimator for `config`.
    """

    n, m = model.n, model.m
    channels = config.resolve_channels(n, m)
    meas = channels[n:]
    if config.estimator == "kf":
        return KalmanEstimator(model, x0=x0, P0=P0, name=config.name)
    if config.estimator == "stkf":
        losses = ChannelLosses([RobustLoss(c.kind, c.nu, c.tau2) for c in channels], n_process=n)
        return RobustEstimator(model, losses, epsilon=config.epsilon, m_iter=config.m_iter, x0=x0, P0=P0,
                               name=config.name)
    if config.estimator == "vbkf_fixed":
        return VariationalFixedEstimator(model, nu=[c.nu for c in meas], tau2=[c.tau2 for c in meas],
                                         n_iter=config.iterations, x0=x0, P0=P0, name=config.name)
    if config.estimator == "vbkf":
        hyper = ChannelHyper([c.nu for c in meas], [c.tau2 for c in meas], [c.rho for c in meas])
        return VariationalEstimator(model, hyper, n_iter=config.iterations, x0=x0, P0=P0, name=config.name)
    hyper = ChannelHyper([c.nu for c in channels], [c.tau2 for c in channels], [c.rho for c in channels])
    switching = Ar2Config(eta=config.eta, enabled=config.enabled) if config.estimator == "ar2" else None
    return AdaptiveEstimator(model, hyper, losses_kind=[c.kind for c in channels], epsilon=config.epsilon,
                             m_iter=config.m_iter, switching=switching, x0=x0, P0=P0, name=config.name)


def read_rows(f: TextIO, m: int, p: int) -> Iterator[Tuple[int, int, np.ndarray, Optional[np.ndarray]]]:
    """
    Yield (line number, k, y, u) for each data row. Lines starting with '#' are skipped.
    """

    reader = csv.reader(f)
    header_seen = False
    for row in reader:
        line = reader.line_num
        if not row or row[0].startswith("#"):
            continue
        if not header_seen and row[0].strip() == "k":
            header_seen = True
            continue
        if len(row) not in (1 + m, 1 + m + p) or (p == 0 and len(row) != 1 + m):
            raise ConfigError(f"Line {line}: expected {1 + m} or {1 + m + p} columns, got {len(row)}")
        try:
            k = int(row[0])
            values = np.array([float(v) for v in row[1:]])
        except ValueError as e:
            raise ConfigError(f"Line {line}: {e}")
        if not np.all(np.isfinite(values)):
            raise ConfigError(f"Line {line}: non-finite value")
        u = values[m:] if len(values) > m else None
        yield line, k, values[:m], u


def stream_filter(estimator: Estimator, source: TextIO, sink: TextIO, header: List[str] = None) -> int:
    """
    Filter measurements row by row: reads (k, y_1..y_m[, u_1..u_p]) and writes
    (k, x̂_1..x̂_n, iterations, lambda_1..lambda_l[, reverted_1..reverted_l]). Memory use does not grow with the input.

    :param estimator: A freshly reset estimator.
    :param source: The measurement CSV.
    :param sink: The output CSV.
    :param header: Optional comment lines written first (without the leading '# ').

    :return: The number of rows processed.
    """

    model = estimator.model
    n, m = model.n, model.m
    l = n + m
    switching = isinstance(estimator, AdaptiveEstimator) and estimator.switching is not None
    for line in header or []:
        sink.write(f"# {line}\n")
    writer = csv.writer(sink, lineterminator="\n")
    columns = ["k"] + [f"x_{i + 1}" for i in range(n)] + ["iterations"] + [f"lambda_{i + 1}" for i in range(l)]
    if switching:
        columns += [f"reverted_{i + 1}" for i in range(l)]
    writer.writerow(columns)
    count = 0
    for line, k, y, u in read_rows(source, m, model.p):
        try:
            diag = estimator.step(y, u)
        except VrkfError as e:
            logger.error("Line %d (k=%d): %s", line, k, e)
            raise
        row = [k] + [repr(float(x)) for x in estimator.state.x] + [diag.iterations] + \
            [repr(float(v)) for v in diag.lam]
        if switching:
            row += [int(b) for b in diag.reverted]
        writer.writerow(row)
        count += 1
    return count
