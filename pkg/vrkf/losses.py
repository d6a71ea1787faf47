import logging
import warnings
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from vrkf.exceptions import LossError
from vrkf.util import GAUSSIAN_NU

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]


class LossKind(Enum):
    student_log = "student_log"
    exponential_welsch = "exponential_welsch"
    power_family = "power_family"
    square_root = "square_root"

    @staticmethod
    def parse(value: Union[str, "LossKind"]) -> "LossKind":
        """
        Accept the enum itself, its value ("student_log") or its CamelCase name ("StudentLog").
        """

        if isinstance(value, LossKind):
            return value
        key = str(value).strip()
        for kind in LossKind:
            if key == kind.value or key.lower() == kind.value.replace("_", ""):
                return kind
        raise LossError(f"Not defined: loss kind {value!r}. Valid: {', '.join(k.value for k in LossKind)}")


class LossFamily(ABC):
    """
    A robust loss J_ν(e) with weight d_ν(e) = J'(e)/e and derivative factor ι_ν(e) = d'(e)/e.
    All methods are vectorized over (e, ν, τ²). ν ≥ 1e8 evaluates the Gaussian limit
    J = e²/(2τ²), d = 1/τ², ι = 0 without touching the closed forms.
    """

    # Largest admissible ν (exclusive), ignoring the Gaussian sentinel.
    nu_upper: float = np.inf
    # True if the weight tends to 0 as ν → 0⁺ at fixed e ≠ 0.
    weight_vanishes_at_zero_nu: bool = True

    @abstractmethod
    def _value(self, e: np.ndarray, nu: np.ndarray, tau2: np.ndarray) -> np.ndarray:
        raise Exception()

    @abstractmethod
    def _weight(self, e: np.ndarray, nu: np.ndarray, tau2: np.ndarray) -> np.ndarray:
        raise Exception()

    @abstractmethod
    def _iota(self, e: np.ndarray, nu: np.ndarray, tau2: np.ndarray) -> np.ndarray:
        raise Exception()

    def value(self, e: ArrayLike, nu: ArrayLike, tau2: ArrayLike) -> ArrayLike:
        return self._evaluate(self._value, lambda e_, t_: 0.5 * e_ ** 2 / t_, e, nu, tau2)

    def weight(self, e: ArrayLike, nu: ArrayLike, tau2: ArrayLike) -> ArrayLike:
        return self._evaluate(self._weight, lambda e_, t_: 1.0 / t_, e, nu, tau2)

    def iota(self, e: ArrayLike, nu: ArrayLike, tau2: ArrayLike) -> ArrayLike:
        return self._evaluate(self._iota, lambda e_, t_: np.zeros_like(e_), e, nu, tau2)

    @staticmethod
    def _evaluate(fn, gaussian_fn, e, nu, tau2) -> ArrayLike:
        scalar = np.ndim(e) == 0 and np.ndim(nu) == 0 and np.ndim(tau2) == 0
        e, nu, tau2 = (np.array(a, dtype=float) for a in np.broadcast_arrays(e, nu, tau2))
        out = np.asarray(gaussian_fn(e, tau2), dtype=float).copy()
        robust = nu < GAUSSIAN_NU
        if robust.any():
            with np.errstate(over="ignore", under="ignore"):
                out[robust] = fn(e[robust], nu[robust], tau2[robust])
        return float(out) if scalar else out


class StudentLog(LossFamily):
    """
    J = (ν/2)·log(1 + e²/(ντ²)), the negative log-likelihood of Student's t up to a constant.
    """

    def _value(self, e, nu, tau2):
        return 0.5 * nu * np.log1p(e ** 2 / (nu * tau2))

    def _weight(self, e, nu, tau2):
        return nu / (nu * tau2 + e ** 2)

    def _iota(self, e, nu, tau2):
        return -2.0 * nu / (nu * tau2 + e ** 2) ** 2


class ExponentialWelsch(LossFamily):
    """
    J = ν²·(1 − exp(−e²/(2ν²τ²))).
    """

    def _value(self, e, nu, tau2):
        return -nu ** 2 * np.expm1(-e ** 2 / (2 * nu ** 2 * tau2))

    def _weight(self, e, nu, tau2):
        return np.exp(-e ** 2 / (2 * nu ** 2 * tau2)) / tau2

    def _iota(self, e, nu, tau2):
        return -np.exp(-e ** 2 / (2 * nu ** 2 * tau2)) / (nu ** 2 * tau2 ** 2)


class PowerFamily(LossFamily):
    """
    J = ((2−ν)/ν)·((e²/(τ²(2−ν)) + 1)^(ν/2) − 1) for 0 < ν < 2.
    The weight at ν → 0⁺ tends to 1/(τ²(1 + e²/(2τ²))), not to 0.
    """

    nu_upper = 2.0
    weight_vanishes_at_zero_nu = False

    def _value(self, e, nu, tau2):
        a = 2.0 - nu
        return a / nu * np.expm1(0.5 * nu * np.log1p(e ** 2 / (tau2 * a)))

    def _weight(self, e, nu, tau2):
        g = e ** 2 / (tau2 * (2.0 - nu)) + 1.0
        return g ** (0.5 * nu - 1.0) / tau2

    def _iota(self, e, nu, tau2):
        g = e ** 2 / (tau2 * (2.0 - nu)) + 1.0
        return -g ** (0.5 * nu - 2.0) / tau2 ** 2


class SquareRoot(LossFamily):
    """
    J = √(ν(ν + e²/τ²)) − ν.
    """

    def _value(self, e, nu, tau2):
        u = e ** 2 / tau2
        return u / (np.sqrt(1.0 + u / nu) + 1.0)

    def _weight(self, e, nu, tau2):
        return 1.0 / (tau2 * np.sqrt(1.0 + e ** 2 / (nu * tau2)))

    def _iota(self, e, nu, tau2):
        return -1.0 / (nu * tau2 ** 2 * (1.0 + e ** 2 / (nu * tau2)) ** 1.5)


LOSS_FAMILIES: Dict[LossKind, LossFamily] = {LossKind.student_log: StudentLog(),
                                             LossKind.exponential_welsch: ExponentialWelsch(),
                                             LossKind.power_family: PowerFamily(),
                                             LossKind.square_root: SquareRoot()}


@dataclass(frozen=True)
class RobustLoss:
    """
    One channel's loss: a family and its (ν, τ²).
    """

    kind: LossKind
    nu: float
    tau2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind.parse(self.kind))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "tau2", float(self.tau2))
        if not self.nu > 0:
            raise LossError(f"nu must be positive, got {self.nu}")
        if not self.tau2 > 0:
            raise LossError(f"tau2 must be positive, got {self.tau2}")
        upper = LOSS_FAMILIES[self.kind].nu_upper
        if self.nu < GAUSSIAN_NU and self.nu >= upper:
            if self.nu == upper:
                warnings.warn(f"{self.kind.value} with nu={upper} is the Gaussian loss; using the Gaussian branch",
                              RuntimeWarning)
                object.__setattr__(self, "nu", GAUSSIAN_NU)
            else:
                raise LossError(f"{self.kind.value} needs nu < {upper}, got {self.nu}")

    @property
    def family(self) -> LossFamily:
        return LOSS_FAMILIES[self.kind]

    @property
    def is_gaussian(self) -> bool:
        return self.nu >= GAUSSIAN_NU

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "nu": self.nu, "tau2": self.tau2}

    @staticmethod
    def from_dict(d: dict) -> "RobustLoss":
        return RobustLoss(kind=d.get("kind", LossKind.student_log.value), nu=d["nu"], tau2=d.get("tau2", 1.0))


def gaussian_loss(tau2: float = 1.0) -> RobustLoss:
    return RobustLoss(LossKind.student_log, GAUSSIAN_NU, tau2)


class ChannelLosses:
    """
    The l = n + m per-channel losses of a whitened system: n process channels, then m measurement channels.
    """

    def __init__(self, losses: Iterable[RobustLoss], n_process: Optional[int] = None):
        """
        :param losses: One loss per whitened channel.
        :param n_process: The number of leading process channels, if known.
        """

        self.losses: List[RobustLoss] = list(losses)
        if not self.losses:
            raise LossError("At least one channel is required")
        if n_process is not None and not 0 <= n_process <= len(self.losses):
            raise LossError(f"n_process={n_process} does not fit {len(self.losses)} channels")
        self.n_process = n_process
        self.nu = np.array([loss.nu for loss in self.losses])
        self.tau2 = np.array([loss.tau2 for loss in self.losses])
        self._groups = {}
        for i, loss in enumerate(self.losses):
            self._groups.setdefault(loss.kind, []).append(i)
        self._groups = {kind: np.array(idx) for kind, idx in self._groups.items()}

    def __len__(self) -> int:
        return len(self.losses)

    def __getitem__(self, i: int) -> RobustLoss:
        return self.losses[i]

    @property
    def kinds(self) -> List[LossKind]:
        return [loss.kind for loss in self.losses]

    def check_dimensions(self, n: int, m: int) -> None:
        if len(self) != n + m:
            raise LossError(f"{len(self)} channel losses for {n} + {m} channels")
        if self.n_process is not None and self.n_process != n:
            raise LossError(f"{self.n_process} process channels, expected {n}")

    def _apply(self, method: str, e: np.ndarray, nu: np.ndarray = None, tau2: np.ndarray = None) -> np.ndarray:
        nu = self.nu if nu is None else nu
        tau2 = self.tau2 if tau2 is None else tau2
        out = np.empty(len(self))
        for kind, idx in self._groups.items():
            out[idx] = getattr(LOSS_FAMILIES[kind], method)(e[idx], nu[idx], tau2[idx])
        return out

    def values(self, e: np.ndarray) -> np.ndarray:
        return self._apply("value", np.asarray(e, dtype=float))

    def weights(self, e: np.ndarray, nu: np.ndarray = None, tau2: np.ndarray = None) -> np.ndarray:
        """
        :param e: Whitened residual per channel.
        :param nu: Optional override of ν per channel.
        :param tau2: Optional override of τ² per channel.

        :return: d_ν(e) per channel.
        """

        return self._apply("weight", np.asarray(e, dtype=float), nu, tau2)

    def iotas(self, e: np.ndarray) -> np.ndarray:
        return self._apply("iota", np.asarray(e, dtype=float))

    def with_params(self, nu: np.ndarray, tau2: np.ndarray) -> "ChannelLosses":
        """
        :return: The same kinds with new (ν, τ²) per channel.
        """

        return ChannelLosses([RobustLoss(kind, float(a), float(b)) for kind, a, b in zip(self.kinds, nu, tau2)],
                             n_process=self.n_process)

    def to_list(self) -> List[dict]:
        return [loss.to_dict() for loss in self.losses]

    @staticmethod
    def uniform(kind: Union[str, LossKind], nu_process: float, nu_measurement: float, n: int, m: int,
                tau2: float = 1.0) -> "ChannelLosses":
        """
        :return: Losses of one kind with a shared ν for all process channels and another for all measurement channels.
        """

        return ChannelLosses([RobustLoss(kind, nu_process, tau2) for _ in range(n)] +
                             [RobustLoss(kind, nu_measurement, tau2) for _ in range(m)], n_process=n)


def loss_value(loss: RobustLoss, e: ArrayLike) -> ArrayLike:
    return loss.family.value(e, loss.nu, loss.tau2)


def weight(loss: RobustLoss, e: ArrayLike) -> ArrayLike:
    return loss.family.weight(e, loss.nu, loss.tau2)


def iota(loss: RobustLoss, e: ArrayLike) -> ArrayLike:
    return loss.family.iota(e, loss.nu, loss.tau2)


def influence(loss: RobustLoss, e: ArrayLike) -> ArrayLike:
    """
    :return: ∂J/∂e = d_ν(e)·e.
    """

    return weight(loss, e) * np.asarray(e, dtype=float) if np.ndim(e) else weight(loss, e) * float(e)


def convexity_boundary(loss: RobustLoss) -> float:
    """
    :param loss: A StudentLog loss.

    :return: √ν·τ. The loss is convex on (−√ν·τ, √ν·τ) and concave outside it.
    """

    if loss.kind != LossKind.student_log:
        raise LossError(f"The convexity boundary is defined for student_log only, got {loss.kind.value}")
    return float(np.sqrt(loss.nu * loss.tau2))
