from typing import Tuple

import numpy as np

from vrkf.experiment import Experiment
from vrkf.statespace import FixedGaussian, LinearModel, Mixture, NoiseSpec, TimeVarying
from vrkf.util import get_args


class Example1(Experiment):
    """
    Constant-velocity target tracking with position measurements.
    Case 1: measurement outliers. Case 2: a slowly varying measurement variance.
    """

    experiment_id = "example1"
    cases = (1, 2)
    default_steps = 6000

    T = 0.01
    # Nominal measurement variance.
    R = 0.1

    def get_model(self) -> LinearModel:
        T = self.T
        B = np.array([[0.5 * T ** 2], [T]])
        return LinearModel(A=[[1.0, T], [0.0, 1.0]], C=[[1.0, 0.0]], Q=B @ B.T, R=[[self.R]], B_u=B, dt=T)

    def get_noise(self) -> Tuple[NoiseSpec, NoiseSpec]:
        w = FixedGaussian([[1.0]], maps_through_input=True)
        if self.case == 1:
            v = Mixture(0.95, FixedGaussian([[self.R]]), FixedGaussian([[10.0]]))
        else:
            v = TimeVarying("sin_sq", [[self.R]], params={"amplitude": 2.0, "frequency": 0.04, "offset": 1.0})
        return w, v


def build_example1(case: int = 1) -> Tuple[LinearModel, Tuple[NoiseSpec, NoiseSpec]]:
    """
    :param case: 1 or 2.

    :return: Tuple: the model, the (process, measurement) noise pair.
    """

    e = Example1(case=case)
    return e.get_model(), e.get_noise()


if __name__ == "__main__":
    from vrkf.bench import run_from_args

    args = get_args("example1")
    run_from_args(Example1(case=args.case, steps=args.steps), args)
