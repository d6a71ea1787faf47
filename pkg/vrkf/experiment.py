import json
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from vrkf.exceptions import ConfigError
from vrkf.filters import FilterConfig, load_filter_configs
from vrkf.statespace import LinearModel, NoiseSpec, Trajectory, simulate

logger = logging.getLogger(__name__)

PANEL_DIR = Path(__file__).resolve().parent.joinpath("data", "panels")


def panel_path(experiment_id: str, case: int) -> Path:
    return PANEL_DIR.joinpath(f"{experiment_id}_case{case}.json")


class Experiment(ABC):
    """
    Abstract class for a benchmark experiment.

    1. Build the nominal model the estimators use.
    2. Build the true process and measurement noise of the chosen case.
    3. Simulate one trajectory per seed. Every estimator of the panel runs on the same trajectory.
    """

    experiment_id: str = ""
    cases: Tuple[int, ...] = (1,)
    # Defaults for the run length and the Monte Carlo count.
    default_steps: int = 1000
    default_seeds: int = 50

    def __init__(self, case: int = 1, steps: int = None):
        """
        :param case: The noise case.
        :param steps: N. Defaults to the panel file's value.
        """

        if case not in self.cases:
            raise ConfigError(f"Not defined: {self.experiment_id} case {case}. Valid cases: "
                              f"{', '.join(str(c) for c in self.cases)}")
        self.case = case
        self._panel_doc = self._read_panel_doc()
        self.steps = int(steps if steps is not None else self._panel_doc.get("steps", self.default_steps))
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")

    def _read_panel_doc(self) -> dict:
        path = panel_path(self.experiment_id, self.case)
        if not path.exists():
            raise ConfigError(f"No panel file for {self.experiment_id} case {self.case}: {path}")
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}")

    @abstractmethod
    def get_model(self) -> LinearModel:
        """
        :return: The nominal model shared by the simulation and the estimators.
        """

        raise Exception()

    @abstractmethod
    def get_noise(self) -> Tuple[NoiseSpec, NoiseSpec]:
        """
        :return: The true (process, measurement) noise of this case.
        """

        raise Exception()

    def get_inputs(self, seed: int) -> Optional[np.ndarray]:
        """
        :return: The N×p input sequence, or None.
        """

        return None

    def get_forcing(self, seed: int) -> Optional[np.ndarray]:
        """
        :return: A deterministic N×n term added to the state, or None.
        """

        return None

    def get_prior(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        :return: The estimators' prior mean and covariance.
        """

        n = self.get_model().n
        return np.zeros(n), np.eye(n)

    def get_panel(self) -> List[FilterConfig]:
        """
        :return: The estimator panel of this case.
        """

        return load_filter_configs(self._panel_doc)

    @property
    def options(self) -> dict:
        """
        :return: Constructor options beyond the case and N, to rebuild the experiment elsewhere.
        """

        return {}

    @property
    def default_seed_count(self) -> int:
        return int(self._panel_doc.get("seeds", self.default_seeds))

    def simulate(self, seed: int) -> Trajectory:
        w_spec, v_spec = self.get_noise()
        return simulate(self.get_model(), w_spec, v_spec, self.steps, seed, u_seq=self.get_inputs(seed),
                        forcing=self.get_forcing(seed))

    def get_config(self) -> dict:
        """
        :return: A JSON-ready description of the model, noise and panel.
        """

        w_spec, v_spec = self.get_noise()
        return {"experiment": self.experiment_id,
                "case": self.case,
                "steps": self.steps,
                "model": self.get_model().to_dict(),
                "process_noise": w_spec.to_dict(),
                "measurement_noise": v_spec.to_dict(),
                "panel": [c.to_dict() for c in self.get_panel()]}
