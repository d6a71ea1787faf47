import logging
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from vrkf.exceptions import DivergenceError, DimensionError, ModelError
from vrkf.statespace import LinearModel, Trajectory
from vrkf.util import symmetrize

logger = logging.getLogger(__name__)

# Iterates with a larger norm are treated as divergent.
DIVERGENCE_NORM = 1e12
# Hyperparameter scales never fall below this.
TAU2_FLOOR = 1e-12


@dataclass
class FilterState:
    """
    Posterior mean and covariance.
    """

    x: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1)
        self.P = symmetrize(np.atleast_2d(np.asarray(self.P, dtype=float)))
        if self.P.shape != (len(self.x), len(self.x)):
            raise DimensionError(f"P must be {len(self.x)}×{len(self.x)}, got {self.P.shape}")

    def copy(self) -> "FilterState":
        return FilterState(self.x.copy(), self.P.copy())

    def is_valid(self) -> bool:
        """
        :return: True if the mean is finite and P is symmetric positive-definite.
        """

        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.P))):
            return False
        return bool(np.linalg.eigvalsh(self.P)[0] > 0)


@dataclass
class ChannelHyper:
    """
    Per-channel adaptive parameters: degrees of freedom ν, scale τ² and forgetting factor ρ.
    """

    nu: np.ndarray
    tau2: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.nu = np.atleast_1d(np.asarray(self.nu, dtype=float)).copy()
        self.tau2 = np.maximum(np.atleast_1d(np.asarray(self.tau2, dtype=float)), TAU2_FLOOR)
        self.rho = np.broadcast_to(np.asarray(self.rho, dtype=float), self.nu.shape).copy()
        if not (self.nu.shape == self.tau2.shape == self.rho.shape):
            raise DimensionError("nu, tau2 and rho must have one entry per channel")
        if np.any(self.nu <= 0):
            raise ModelError(f"nu must be positive, got {self.nu}")
        if np.any(self.rho <= 0) or np.any(self.rho > 1):
            raise ModelError(f"rho must be in (0, 1], got {self.rho}")

    def __len__(self) -> int:
        return len(self.nu)

    def copy(self) -> "ChannelHyper":
        return ChannelHyper(self.nu.copy(), self.tau2.copy(), self.rho.copy())

    @property
    def adaptive(self) -> np.ndarray:
        return self.rho < 1


@dataclass
class StepDiagnostics:
    """
    Per-step diagnostics. `lam` is the inflation 1/d_ν(e) of each whitened channel (process channels first).
    `measurement_variance` is the variance the estimator assumed for each measurement in physical units.
    """

    iterations: int
    innovation: np.ndarray
    lam: np.ndarray
    measurement_variance: np.ndarray
    e: Optional[np.ndarray] = None
    reverted: Optional[np.ndarray] = None
    wpw: Optional[np.ndarray] = None


@dataclass
class EstimatorRun:
    """
    The outcome of running one estimator over a trajectory.
    """

    name: str
    estimates: np.ndarray
    iterations: np.ndarray
    lam: Optional[np.ndarray] = None
    measurement_variance: Optional[np.ndarray] = None
    reverted: Optional[np.ndarray] = None
    wall_time: float = 0.0
    states: list = field(default_factory=list)

    @property
    def mean_iterations(self) -> float:
        return float(np.mean(self.iterations))


def check_iterate(x: np.ndarray, step: int = -1) -> None:
    if not np.all(np.isfinite(x)):
        raise DivergenceError("Non-finite iterate", step=step)
    if np.linalg.norm(x) > DIVERGENCE_NORM:
        raise DivergenceError(f"Iterate norm {np.linalg.norm(x):.3g} exceeds {DIVERGENCE_NORM:g}", step=step)


class Estimator(ABC):
    """
    Abstract class for a recursive state estimator.

    1. Initialize with a model and a prior (x0, P0).
    2. Per step: predict, update with the measurement, record diagnostics.
    3. `run` drives a whole trajectory and collects the estimates.
    """

    def __init__(self, model: LinearModel, x0: np.ndarray = None, P0: np.ndarray = None, name: str = ""):
        """
        :param model: The nominal model.
        :param x0: The prior mean. Zeros if None.
        :param P0: The prior covariance. Identity if None.
        :param name: Display name.
        """

        self.model = model
        self.name = name or self.__class__.__name__
        self._x0 = np.zeros(model.n) if x0 is None else np.asarray(x0, dtype=float)
        self._P0 = np.eye(model.n) if P0 is None else np.asarray(P0, dtype=float)
        self.state = FilterState(self._x0.copy(), self._P0.copy())
        # The index of the last processed measurement.
        self.k = 0

    def reset(self, x0: np.ndarray = None, P0: np.ndarray = None) -> None:
        """
        Return to the prior. Subclasses also reset their hyperparameters.
        """

        if x0 is not None:
            self._x0 = np.asarray(x0, dtype=float)
        if P0 is not None:
            self._P0 = np.asarray(P0, dtype=float)
        self.state = FilterState(self._x0.copy(), self._P0.copy())
        self.k = 0
        self.clear_hyper()

    def clear_hyper(self) -> None:
        pass

    @abstractmethod
    def update(self, u: Optional[np.ndarray], y: np.ndarray) -> StepDiagnostics:
        """
        Advance `self.state` by one step.

        :param u: The input applied over the step, or None.
        :param y: The measurement.

        :return: The step diagnostics.
        """

        raise Exception()

    def step(self, y: np.ndarray, u: Optional[np.ndarray] = None) -> StepDiagnostics:
        y = np.asarray(y, dtype=float).reshape(-1)
        if y.shape != (self.model.m,):
            raise DimensionError(f"Measurement has {y.shape[0]} entries, expected {self.model.m}")
        self.k += 1
        try:
            return self.update(u, y)
        except DivergenceError as e:
            e.step = self.k
            raise

    def run(self, trajectory: Trajectory, record: bool = False, keep_states: bool = False) -> EstimatorRun:
        """
        Filter every measurement of a trajectory from the prior.

        :param trajectory: The trajectory.
        :param record: If True, keep per-step λ, measurement variances and revert flags.
        :param keep_states: If True, keep a copy of every posterior state.

        :return: The estimates x̂_1..x̂_N and diagnostics.
        """

        self.reset()
        n_steps = trajectory.n_steps
        estimates = np.empty((n_steps, self.model.n))
        iterations = np.empty(n_steps, dtype=int)
        lam = var = reverted = None
        states = []
        start = time.perf_counter()
        for k in range(n_steps):
            u = None if trajectory.inputs is None else trajectory.inputs[k]
            diag = self.step(trajectory.measurements[k], u)
            estimates[k] = self.state.x
            iterations[k] = diag.iterations
            if record:
                if lam is None:
                    lam = np.empty((n_steps, len(diag.lam)))
                    var = np.empty((n_steps, self.model.m))
                    reverted = np.zeros((n_steps, len(diag.lam)), dtype=bool)
                lam[k] = diag.lam
                var[k] = diag.measurement_variance
                if diag.reverted is not None:
                    reverted[k] = diag.reverted
            if keep_states:
                states.append(self.state.copy())
        wall_time = time.perf_counter() - start
        logger.debug("%s: %d steps in %.3f s", self.name, n_steps, wall_time)
        return EstimatorRun(name=self.name, estimates=estimates, iterations=iterations, lam=lam,
                            measurement_variance=var, reverted=reverted, wall_time=wall_time, states=states)
