import csv
import json
import logging
from abc import ABC, abstractmethod
from bisect import bisect_left
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple, Union

import h5py
import numpy as np

from vrkf.exceptions import ConfigError, CovarianceError, DimensionError, ModelError
from vrkf.util import STREAM_MEASUREMENT, STREAM_PROCESS, floor_covariance, make_rng

logger = logging.getLogger(__name__)


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ModelError(f"{name} must be a matrix, got shape {arr.shape}")
    return arr


def _check_symmetric(m: np.ndarray, name: str) -> None:
    if m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > 1e-12:
        raise ModelError(f"{name} is not symmetric within 1e-12")


def _cholesky(cov: np.ndarray, name: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise CovarianceError(f"{name} is not positive-definite")


class LinearModel:
    """
    A discrete linear state-space system:

        x_k = A x_{k-1} + B_u u_{k-1} + w_k
        y_k = C x_k + v_k

    Q may be rank-deficient when the process noise enters through B_u (it is then B_u B_uᵀ);
    R must be positive-definite.
    """

    def __init__(self, A, C, Q, R, B_u=None, dt: float = 1.0):
        """
        :param A: n×n state transition.
        :param C: m×n observation matrix.
        :param Q: n×n nominal process covariance.
        :param R: m×m nominal measurement covariance.
        :param B_u: n×p input map, or None.
        :param dt: Sampling time in seconds.
        """

        self.A = _as_matrix(A, "A")
        self.C = _as_matrix(C, "C")
        self.Q = _as_matrix(Q, "Q")
        self.R = _as_matrix(R, "R")
        self.B_u = None if B_u is None else _as_matrix(B_u, "B_u")
        self.dt = float(dt)
        self._validate()

    def _validate(self) -> None:
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise DimensionError(f"A must be square, got {self.A.shape}")
        if self.C.shape[1] != n:
            raise DimensionError(f"C has {self.C.shape[1]} columns, expected {n}")
        m = self.C.shape[0]
        if self.Q.shape != (n, n):
            raise DimensionError(f"Q must be {n}×{n}, got {self.Q.shape}")
        if self.R.shape != (m, m):
            raise DimensionError(f"R must be {m}×{m}, got {self.R.shape}")
        if self.B_u is not None and self.B_u.shape[0] != n:
            raise DimensionError(f"B_u has {self.B_u.shape[0]} rows, expected {n}")
        _check_symmetric(self.Q, "Q")
        _check_symmetric(self.R, "R")
        q_eig = np.linalg.eigvalsh(self.Q)
        if q_eig[0] < -1e-12 * max(1.0, q_eig[-1]):
            raise ModelError(f"Q has a negative eigenvalue {q_eig[0]}")
        if np.linalg.eigvalsh(self.R)[0] <= 0:
            raise ModelError("R is not positive-definite")
        if self.dt <= 0:
            raise ModelError(f"dt must be positive, got {self.dt}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.C.shape[0]

    @property
    def p(self) -> int:
        return 0 if self.B_u is None else self.B_u.shape[1]

    def to_dict(self) -> dict:
        d = {"A": self.A.tolist(), "C": self.C.tolist(), "Q": self.Q.tolist(), "R": self.R.tolist(),
             "dt": self.dt}
        if self.B_u is not None:
            d["B_u"] = self.B_u.tolist()
        return d

    @staticmethod
    def from_dict(d: dict) -> "LinearModel":
        missing = [key for key in ("A", "C", "Q", "R") if key not in d]
        if missing:
            raise ConfigError(f"Model is missing {', '.join(missing)}")
        return LinearModel(A=d["A"], C=d["C"], Q=d["Q"], R=d["R"], B_u=d.get("B_u"), dt=d.get("dt", 1.0))


# Schedule multipliers. Each takes (k, dt, params) and returns the scalar applied to base_cov.

def _sin_abs(k: int, dt: float, params: dict) -> float:
    t = k * dt
    return (1.0 + params.get("amplitude", 2.0) * abs(np.sin(params.get("frequency", 0.1) * np.pi * t))) ** 2


def _sin_sq(k: int, dt: float, params: dict) -> float:
    return params.get("amplitude", 2.0) * np.sin(params.get("frequency", 0.04) * np.pi * k * dt) ** 2 + \
        params.get("offset", 1.0)


def _step(k: int, dt: float, params: dict) -> float:
    # Level j applies for switches[j-1] < k <= switches[j].
    return float(params["levels"][bisect_left(params["switches"], k)])


SCHEDULES: Dict[str, Callable[[int, float, dict], float]] = {"sin_abs": _sin_abs,
                                                             "sin_sq": _sin_sq,
                                                             "step": _step}


class NoiseSpec(ABC):
    """
    Abstract description of a zero-mean noise source.
    Concrete specs are immutable after construction and can be shared between threads.
    """

    kind: str = ""

    def __init__(self, maps_through_input: bool = False):
        # If True, draws are p-dimensional and enter the state through B_u.
        self.maps_through_input = bool(maps_through_input)

    @property
    @abstractmethod
    def dim(self) -> int:
        raise Exception()

    @abstractmethod
    def sample(self, k: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        """
        :param k: The step index.
        :param dt: The sampling time; schedules evaluate at t = k·dt.
        :param rng: The random generator of this channel.

        :return: One draw.
        """

        raise Exception()

    @abstractmethod
    def covariance(self, k: int, dt: float) -> np.ndarray:
        """
        :return: The total covariance of a draw at step k.
        """

        raise Exception()

    @abstractmethod
    def nominal_covariance(self, k: int, dt: float) -> np.ndarray:
        """
        :return: The covariance at step k ignoring outlier components.
        """

        raise Exception()

    @abstractmethod
    def _params(self) -> dict:
        raise Exception()

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d.update(self._params())
        if self.maps_through_input:
            d["maps_through_input"] = True
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSpec) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"{self.__class__.__name__}({self.to_json()})"


class FixedGaussian(NoiseSpec):
    kind = "fixed_gaussian"

    def __init__(self, cov, maps_through_input: bool = False):
        super().__init__(maps_through_input=maps_through_input)
        self.cov = _as_matrix(cov, "cov")
        _check_symmetric(self.cov, "cov")
        self._chol = _cholesky(floor_covariance(self.cov), "cov")

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def sample(self, k: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        return self._chol @ rng.standard_normal(self.dim)

    def covariance(self, k: int, dt: float) -> np.ndarray:
        return self.cov

    def nominal_covariance(self, k: int, dt: float) -> np.ndarray:
        return self.cov

    def _params(self) -> dict:
        return {"cov": self.cov.tolist()}


class TimeVarying(NoiseSpec):
    kind = "time_varying"

    def __init__(self, schedule: str, base_cov, params: dict = None, maps_through_input: bool = False):
        super().__init__(maps_through_input=maps_through_input)
        if schedule not in SCHEDULES:
            raise ConfigError(f"Not defined: schedule {schedule!r}. Valid: {', '.join(SCHEDULES)}")
        self.schedule = schedule
        self.params = dict(params or {})
        if schedule == "step":
            self._validate_step()
        self.base_cov = _as_matrix(base_cov, "base_cov")
        _check_symmetric(self.base_cov, "base_cov")
        self._chol = _cholesky(floor_covariance(self.base_cov), "base_cov")

    def _validate_step(self) -> None:
        levels = self.params.get("levels")
        switches = self.params.get("switches")
        if levels is None or switches is None:
            raise ConfigError("step schedule needs 'levels' and 'switches'")
        if len(levels) != len(switches) + 1:
            raise ConfigError(f"step schedule needs {len(switches) + 1} levels, got {len(levels)}")
        if any(b <= a for a, b in zip(switches, switches[1:])):
            raise ConfigError(f"step switches must be strictly increasing, got {switches}")
        if any(level <= 0 for level in levels):
            raise ConfigError(f"step levels must be positive, got {levels}")

    def multiplier(self, k: int, dt: float) -> float:
        return SCHEDULES[self.schedule](k, dt, self.params)

    @property
    def dim(self) -> int:
        return self.base_cov.shape[0]

    def sample(self, k: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        return np.sqrt(self.multiplier(k, dt)) * (self._chol @ rng.standard_normal(self.dim))

    def covariance(self, k: int, dt: float) -> np.ndarray:
        return self.multiplier(k, dt) * self.base_cov

    def nominal_covariance(self, k: int, dt: float) -> np.ndarray:
        return self.covariance(k, dt)

    def _params(self) -> dict:
        return {"schedule": self.schedule, "params": self.params, "base_cov": self.base_cov.tolist()}


class Mixture(NoiseSpec):
    """
    Draws from `nominal` with probability epsilon and from `outlier` otherwise.
    """

    kind = "mixture"

    def __init__(self, epsilon: float, nominal: NoiseSpec, outlier: NoiseSpec, maps_through_input: bool = False):
        super().__init__(maps_through_input=maps_through_input)
        if not 0 < epsilon <= 1:
            raise ConfigError(f"Mixture epsilon must be in (0, 1], got {epsilon}")
        if nominal.dim != outlier.dim:
            raise DimensionError(f"Mixture components differ in dimension: {nominal.dim} vs {outlier.dim}")
        self.epsilon = float(epsilon)
        self.nominal = nominal
        self.outlier = outlier

    @property
    def dim(self) -> int:
        return self.nominal.dim

    def sample(self, k: int, dt: float, rng: np.random.Generator) -> np.ndarray:
        if rng.random() < self.epsilon:
            return self.nominal.sample(k, dt, rng)
        return self.outlier.sample(k, dt, rng)

    def covariance(self, k: int, dt: float) -> np.ndarray:
        return self.epsilon * self.nominal.covariance(k, dt) + (1 - self.epsilon) * self.outlier.covariance(k, dt)

    def nominal_covariance(self, k: int, dt: float) -> np.ndarray:
        return self.nominal.nominal_covariance(k, dt)

    def _params(self) -> dict:
        return {"epsilon": self.epsilon, "nominal": self.nominal.to_dict(), "outlier": self.outlier.to_dict()}


def noise_from_dict(d: dict) -> NoiseSpec:
    """
    :param d: A JSON document with a `kind` tag.

    :return: The NoiseSpec it describes.
    """

    kind = d.get("kind")
    flag = d.get("maps_through_input", False)
    try:
        if kind == FixedGaussian.kind:
            return FixedGaussian(d["cov"], maps_through_input=flag)
        if kind == TimeVarying.kind:
            return TimeVarying(d["schedule"], d["base_cov"], params=d.get("params"), maps_through_input=flag)
        if kind == Mixture.kind:
            return Mixture(d["epsilon"], noise_from_dict(d["nominal"]), noise_from_dict(d["outlier"]),
                           maps_through_input=flag)
    except KeyError as e:
        raise ConfigError(f"Noise spec of kind {kind!r} is missing {e}")
    raise ConfigError(f"Not defined: noise kind {kind!r}")


def noise_from_json(text: str) -> NoiseSpec:
    return noise_from_dict(json.loads(text))


def sample_noise(spec: NoiseSpec, k: int, rng: np.random.Generator, dt: float = 1.0) -> np.ndarray:
    return spec.sample(k, dt, rng)


def sample_student_compound(nu: float, mu: float, tau2: float, rng: np.random.Generator,
                            size: Optional[int] = None) -> Union[float, np.ndarray]:
    """
    Draw λ ∼ Inv-Gamma(ν/2, ντ²/2), then x ∼ N(μ, λ). The marginal of x is Student's t with ν degrees of freedom,
    location μ and scale τ².

    :param nu: Degrees of freedom.
    :param mu: Location.
    :param tau2: Squared scale.
    :param rng: The random generator.
    :param size: Number of draws; None for a scalar.
    """

    if nu <= 0 or tau2 <= 0:
        raise ConfigError(f"nu and tau2 must be positive, got nu={nu}, tau2={tau2}")
    lam = (0.5 * nu * tau2) / rng.gamma(0.5 * nu, size=size)
    return mu + np.sqrt(lam) * rng.standard_normal(size=size)


class Trajectory:
    """
    Ground truth and measurements from one simulated run. Arrays are read-only.
    """

    def __init__(self, states: np.ndarray, measurements: np.ndarray, inputs: Optional[np.ndarray],
                 w: np.ndarray, v: np.ndarray, true_w_cov: np.ndarray, true_v_cov: np.ndarray, seed: int,
                 forcing: Optional[np.ndarray] = None):
        """
        :param states: (N+1)×n states x_0..x_N.
        :param measurements: N×m measurements y_1..y_N.
        :param inputs: N×p inputs u_0..u_{N-1}, or None.
        :param w: N×n process noise added to the state at each step (after B_u mapping).
        :param v: N×m measurement noise.
        :param true_w_cov: N×n×n nominal process covariance per step.
        :param true_v_cov: N×m×m nominal measurement covariance per step.
        :param seed: The seed the run was drawn from.
        :param forcing: N×n deterministic state forcing, or None.
        """

        self.states = states
        self.measurements = measurements
        self.inputs = inputs
        self.w = w
        self.v = v
        self.true_w_cov = true_w_cov
        self.true_v_cov = true_v_cov
        self.seed = int(seed)
        self.forcing = forcing
        for arr in (states, measurements, inputs, w, v, true_w_cov, true_v_cov, forcing):
            if arr is not None:
                arr.setflags(write=False)
        if len(states) != len(measurements) + 1:
            raise DimensionError(f"{len(states)} states for {len(measurements)} measurements")

    @property
    def n_steps(self) -> int:
        return len(self.measurements)

    def process_residuals(self, model: LinearModel) -> np.ndarray:
        """
        :return: x_k − A x_{k-1} − B_u u_{k-1} − forcing_k for k = 1..N. Equals `w` up to rounding.
        """

        res = self.states[1:] - self.states[:-1] @ model.A.T
        if self.inputs is not None:
            res = res - self.inputs @ model.B_u.T
        if self.forcing is not None:
            res = res - self.forcing
        return res

    def to_csv(self, path: Union[str, Path]) -> None:
        """
        Write columns k, x_1..x_n, y_1..y_m. Row k=0 has empty measurement cells.
        """

        n = self.states.shape[1]
        m = self.measurements.shape[1]
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["k"] + [f"x_{i + 1}" for i in range(n)] + [f"y_{i + 1}" for i in range(m)])
            writer.writerow([0] + [repr(float(x)) for x in self.states[0]] + [""] * m)
            for k in range(1, self.n_steps + 1):
                writer.writerow([k] + [repr(float(x)) for x in self.states[k]] +
                                [repr(float(y)) for y in self.measurements[k - 1]])

    def to_measurement_csv(self, path: Union[str, Path]) -> None:
        """
        Write columns k, y_1..y_m[, u_1..u_p], the input of the streaming filter.
        """

        m = self.measurements.shape[1]
        p = 0 if self.inputs is None else self.inputs.shape[1]
        with Path(path).open("w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["k"] + [f"y_{i + 1}" for i in range(m)] + [f"u_{i + 1}" for i in range(p)])
            for k in range(1, self.n_steps + 1):
                row = [k] + [repr(float(y)) for y in self.measurements[k - 1]]
                if p:
                    row += [repr(float(u)) for u in self.inputs[k - 1]]
                writer.writerow(row)

    def write_hdf5(self, path: Union[str, Path], model: LinearModel = None) -> None:
        """
        Write a "static" group (seed, model matrices) and a "frames" group (per-step arrays).
        """

        with h5py.File(str(path), "w") as f:
            static_group = f.create_group("static")
            static_group.attrs["seed"] = self.seed
            if model is not None:
                for key, value in model.to_dict().items():
                    static_group.create_dataset(key, data=np.asarray(value))
            frames = f.create_group("frames")
            frames.create_dataset("states", data=self.states)
            frames.create_dataset("measurements", data=self.measurements)
            frames.create_dataset("w", data=self.w)
            frames.create_dataset("v", data=self.v)
            frames.create_dataset("true_w_cov", data=self.true_w_cov)
            frames.create_dataset("true_v_cov", data=self.true_v_cov)
            if self.inputs is not None:
                frames.create_dataset("inputs", data=self.inputs)


def simulate(model: LinearModel, w_spec: NoiseSpec, v_spec: NoiseSpec, n_steps: int, seed: int,
             u_seq: Optional[np.ndarray] = None, x0: Optional[np.ndarray] = None,
             forcing: Optional[np.ndarray] = None) -> Trajectory:
    """
    Simulate `n_steps` steps of the model. Process and measurement noise use independent substreams of `seed`.

    :param model: The system.
    :param w_spec: Process noise; n-dimensional, or p-dimensional with maps_through_input set.
    :param v_spec: Measurement noise; m-dimensional.
    :param n_steps: N.
    :param seed: The trajectory seed.
    :param u_seq: N×p inputs, or None for no input.
    :param x0: The initial state; zeros if None.
    :param forcing: Optional N×n deterministic term added to the state at each step.

    :return: The trajectory.
    """

    n, m = model.n, model.m
    if w_spec.maps_through_input:
        if model.B_u is None:
            raise DimensionError("Process noise maps through the input but the model has no B_u")
        if w_spec.dim != model.p:
            raise DimensionError(f"Process noise has dimension {w_spec.dim}, B_u expects {model.p}")
        w_map = model.B_u
    else:
        if w_spec.dim != n:
            raise DimensionError(f"Process noise has dimension {w_spec.dim}, state has {n}")
        w_map = None
    if v_spec.dim != m:
        raise DimensionError(f"Measurement noise has dimension {v_spec.dim}, measurement has {m}")
    if u_seq is not None:
        u_seq = np.asarray(u_seq, dtype=float).reshape(n_steps, -1)
        if model.B_u is None or u_seq.shape[1] != model.p:
            raise DimensionError(f"Inputs of width {u_seq.shape[1]} do not match B_u")
    if forcing is not None:
        forcing = np.asarray(forcing, dtype=float)
        if forcing.shape != (n_steps, n):
            raise DimensionError(f"Forcing must be {n_steps}×{n}, got {forcing.shape}")

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    if x.shape != (n,):
        raise DimensionError(f"x0 must have length {n}")

    w_rng = make_rng(seed, STREAM_PROCESS)
    v_rng = make_rng(seed, STREAM_MEASUREMENT)
    dt = model.dt

    states = np.empty((n_steps + 1, n))
    measurements = np.empty((n_steps, m))
    w_all = np.empty((n_steps, n))
    v_all = np.empty((n_steps, m))
    w_cov = np.empty((n_steps, n, n))
    v_cov = np.empty((n_steps, m, m))
    states[0] = x

    for k in range(1, n_steps + 1):
        w = w_spec.sample(k, dt, w_rng)
        cov = w_spec.nominal_covariance(k, dt)
        if w_map is not None:
            w = w_map @ w
            cov = w_map @ cov @ w_map.T
        x = model.A @ x + w
        if u_seq is not None:
            x = x + model.B_u @ u_seq[k - 1]
        if forcing is not None:
            x = x + forcing[k - 1]
        v = v_spec.sample(k, dt, v_rng)
        states[k] = x
        measurements[k - 1] = model.C @ x + v
        w_all[k - 1] = w
        v_all[k - 1] = v
        w_cov[k - 1] = cov
        v_cov[k - 1] = v_spec.nominal_covariance(k, dt)

    logger.debug("Simulated %d steps with seed %d", n_steps, seed)
    return Trajectory(states=states, measurements=measurements, inputs=u_seq, w=w_all, v=v_all,
                      true_w_cov=w_cov, true_v_cov=v_cov, seed=seed, forcing=forcing)


# Scalar noise scenarios: outliers N(0, 400) with probability 0.01, time variation (1 + 2|sin(0.1πt)|)².

def _unit() -> FixedGaussian:
    return FixedGaussian([[1.0]])


def _outlier() -> FixedGaussian:
    return FixedGaussian([[400.0]])


def _sin_abs_unit() -> TimeVarying:
    return TimeVarying("sin_abs", [[1.0]], params={"amplitude": 2.0, "frequency": 0.1})


NOISE_CASES: Dict[int, Callable[[], Tuple[NoiseSpec, NoiseSpec]]] = {
    1: lambda: (_unit(), Mixture(0.99, _unit(), _outlier())),
    2: lambda: (_unit(), _sin_abs_unit()),
    3: lambda: (_unit(), Mixture(0.99, _sin_abs_unit(), _outlier())),
    4: lambda: (Mixture(0.99, _unit(), _outlier()), _unit()),
    5: lambda: (Mixture(0.99, _sin_abs_unit(), _outlier()), _unit()),
    6: lambda: (Mixture(0.99, _unit(), _outlier()), _sin_abs_unit()),
}


def noise_case(case: int) -> Tuple[NoiseSpec, NoiseSpec]:
    """
    :param case: 1-6.

    :return: The (process, measurement) noise pair of a scalar scenario.
    """

    if case not in NOISE_CASES:
        raise ConfigError(f"Not defined: noise case {case}. Valid: {sorted(NOISE_CASES)}")
    return NOISE_CASES[case]()
