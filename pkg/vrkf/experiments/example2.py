from typing import Tuple

from vrkf.experiments.example1 import Example1
from vrkf.statespace import FixedGaussian, LinearModel, NoiseSpec, TimeVarying
from vrkf.util import get_args

# Forgetting factors compared for the tracking speed.
RHO_SWEEP = (0.995, 0.99, 0.98, 0.97)


class Example2(Example1):
    """
    The tracking model of Example 1 with a step in the measurement variance: 0.1, then 2.5 for 2000 < k ≤ 4000,
    then 0.1 again.
    """

    experiment_id = "example2"
    cases = (1,)
    default_steps = 6000

    SWITCHES = [2000, 4000]
    LEVELS = [1.0, 25.0, 1.0]

    def get_noise(self) -> Tuple[NoiseSpec, NoiseSpec]:
        w = FixedGaussian([[1.0]], maps_through_input=True)
        v = TimeVarying("step", [[self.R]], params={"levels": list(self.LEVELS), "switches": list(self.SWITCHES)})
        return w, v

    def true_variance(self, k: int) -> float:
        """
        :return: The measurement variance at step k.
        """

        _, v = self.get_noise()
        return float(v.covariance(k, self.T)[0, 0])


def build_example2() -> Tuple[LinearModel, NoiseSpec]:
    """
    :return: Tuple: the model, the step measurement noise.
    """

    e = Example2()
    return e.get_model(), e.get_noise()[1]


if __name__ == "__main__":
    from vrkf.bench import run_from_args

    args = get_args("example2")
    run_from_args(Example2(case=args.case, steps=args.steps), args)
