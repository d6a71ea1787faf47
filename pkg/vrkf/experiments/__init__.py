from typing import Dict, Type

from vrkf.exceptions import ConfigError
from vrkf.experiment import Experiment
from vrkf.experiments.example1 import Example1, build_example1
from vrkf.experiments.example2 import Example2, build_example2, RHO_SWEEP
from vrkf.experiments.example3 import Example3, build_example3

EXPERIMENTS: Dict[str, Type[Experiment]] = {Example1.experiment_id: Example1,
                                            Example2.experiment_id: Example2,
                                            Example3.experiment_id: Example3}


def get_experiment(experiment_id: str, case: int = 1, steps: int = None, **options) -> Experiment:
    """
    :param experiment_id: A registered experiment.
    :param case: The noise case.
    :param steps: N, or None for the experiment's default.
    :param options: Experiment-specific options (e.g. `disturbance` for example3).

    :return: The experiment.
    """

    if experiment_id not in EXPERIMENTS:
        raise ConfigError(f"Not defined: experiment {experiment_id!r}. Valid: {', '.join(EXPERIMENTS)}")
    try:
        return EXPERIMENTS[experiment_id](case=case, steps=steps, **options)
    except TypeError as e:
        raise ConfigError(f"{experiment_id}: {e}")
