from typing import Optional, Tuple

import numpy as np

from vrkf.exceptions import ConfigError
from vrkf.experiment import Experiment
from vrkf.statespace import FixedGaussian, LinearModel, Mixture, NoiseSpec, TimeVarying
from vrkf.util import get_args

# Torsion load dynamics.
F = np.array([[0.9205, 0.0795, 0.0085, 0.0003],
              [0.2045, 0.7955, 0.0007, 0.0085],
              [-14.3468, 14.3468, 0.6872, 0.0746],
              [37.5370, -37.5370, 0.1863, 0.6405]])
# Motor torque input.
G1 = np.array([0.0826, 0.0031, 15.5568, 1.2100])
# Disturbance input.
G2 = np.array([0.0031, 0.2076, 1.2100, 38.7470])
# Motor and load angles are measured.
H = np.array([[1.0, 0.0, 0.0, 0.0],
              [0.0, 1.0, 0.0, 0.0]])

DISTURBANCES = ("random_walk", "step", "sinusoid")


def augment(F: np.ndarray, G1: np.ndarray, G2: np.ndarray, H: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Put the disturbance in front of the state as a random walk.

    :return: Tuple: A = [[1, 0], [G2, F]], B = [0; G1], C = [0, H].
    """

    n = F.shape[0]
    A = np.zeros((n + 1, n + 1))
    A[0, 0] = 1.0
    A[1:, 0] = G2
    A[1:, 1:] = F
    B = np.concatenate([[0.0], G1]).reshape(-1, 1)
    C = np.hstack([np.zeros((H.shape[0], 1)), H])
    return A, B, C


class Example3(Experiment):
    """
    Joint disturbance and state estimation on a torsion load system.

    Case 1: process variance 100Q except for 800 ≤ k < 1200.
    Case 2: process outliers (900Q with probability 0.01) and a slowly varying measurement variance.
    Case 3: a slowly varying measurement variance with outliers (900R with probability 0.01).
    """

    experiment_id = "example3"
    cases = (1, 2, 3)
    default_steps = 2000

    DT = 0.01
    Q = np.diag([0.01] + [0.01] * 4)
    R = 0.5 * np.eye(2)
    SIN_SQ = {"amplitude": 2.0, "frequency": 0.04, "offset": 1.0}

    def __init__(self, case: int = 1, steps: int = None, disturbance: str = "random_walk",
                 disturbance_params: dict = None):
        """
        :param disturbance: The true disturbance: "random_walk" follows the model; "step" and "sinusoid" are
                            deterministic shapes.
        :param disturbance_params: `amplitude`, plus `onset` (step index) for "step" or `frequency` (Hz) for
                                   "sinusoid".
        """

        if disturbance not in DISTURBANCES:
            raise ConfigError(f"Not defined: disturbance {disturbance!r}. Valid: {', '.join(DISTURBANCES)}")
        self.disturbance = disturbance
        self.disturbance_params = {"amplitude": 1.0, "onset": 500, "frequency": 0.5, **(disturbance_params or {})}
        super().__init__(case=case, steps=steps)

    def get_model(self) -> LinearModel:
        A, B, C = augment(F, G1, G2, H)
        return LinearModel(A=A, C=C, Q=self.Q, R=self.R, B_u=B, dt=self.DT)

    def _true_q(self) -> np.ndarray:
        q = self.Q.copy()
        if self.disturbance != "random_walk":
            q[0, 0] = 0.0
        return q

    def get_noise(self) -> Tuple[NoiseSpec, NoiseSpec]:
        q = self._true_q()
        if self.case == 1:
            w = TimeVarying("step", q, params={"levels": [100.0, 1.0, 100.0], "switches": [799, 1199]})
            v = FixedGaussian(self.R)
        elif self.case == 2:
            w = Mixture(0.99, FixedGaussian(q), FixedGaussian(900.0 * q))
            v = TimeVarying("sin_sq", self.R, params=dict(self.SIN_SQ))
        else:
            w = FixedGaussian(q)
            v = Mixture(0.99, TimeVarying("sin_sq", self.R, params=dict(self.SIN_SQ)), FixedGaussian(900.0 * self.R))
        return w, v

    def disturbance_path(self) -> Optional[np.ndarray]:
        """
        :return: d_1..d_N of a deterministic disturbance, or None for the random walk.
        """

        if self.disturbance == "random_walk":
            return None
        k = np.arange(1, self.steps + 1)
        amplitude = self.disturbance_params["amplitude"]
        if self.disturbance == "step":
            return np.where(k >= self.disturbance_params["onset"], amplitude, 0.0)
        return amplitude * np.sin(2.0 * np.pi * self.disturbance_params["frequency"] * k * self.DT)

    def get_forcing(self, seed: int) -> Optional[np.ndarray]:
        d = self.disturbance_path()
        if d is None:
            return None
        forcing = np.zeros((self.steps, self.get_model().n))
        forcing[:, 0] = np.diff(d, prepend=0.0)
        return forcing

    @property
    def options(self) -> dict:
        if self.disturbance == "random_walk":
            return {}
        return {"disturbance": self.disturbance, "disturbance_params": dict(self.disturbance_params)}

    def get_config(self) -> dict:
        config = super().get_config()
        config["disturbance"] = self.disturbance
        config.update(self.options)
        return config


def build_example3(case: int = 1, disturbance: str = "random_walk") -> Tuple[LinearModel, Tuple[NoiseSpec, NoiseSpec]]:
    """
    :param case: 1, 2 or 3.
    :param disturbance: The true disturbance shape.

    :return: Tuple: the augmented model, the (process, measurement) noise pair.
    """

    e = Example3(case=case, disturbance=disturbance)
    return e.get_model(), e.get_noise()


if __name__ == "__main__":
    from vrkf.bench import run_from_args

    args = get_args("example3")
    run_from_args(Example3(case=args.case, steps=args.steps), args)
