import logging
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from vrkf.estimator import ChannelHyper, Estimator, FilterState, StepDiagnostics, TAU2_FLOOR
from vrkf.exceptions import DimensionError
from vrkf.kalman_estimator import posterior_cov, predict
from vrkf.losses import ChannelLosses, LossKind, RobustLoss
from vrkf.robust_estimator import measurement_variance, robust_update, whiten
from vrkf.statespace import LinearModel

logger = logging.getLogger(__name__)

LossKinds = Union[str, LossKind, Sequence[Union[str, LossKind]]]


@dataclass
class Ar2Config:
    """
    Switching rule: an adaptive channel keeps its previous scale when the candidate update moves it by more than
    ξ = η·√(2ν²/(ν+1)³)·τ².

    :param eta: Threshold multiplier; [0.25, 1] is the recommended range.
    :param enabled: Per-channel flags; None enables every channel.
    """

    eta: float = 1.0
    enabled: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError(f"eta must be non-negative, got {self.eta}")
        if not 0.25 <= self.eta <= 1:
            warnings.warn(f"eta={self.eta} is outside the recommended range [0.25, 1]", RuntimeWarning)
        if self.enabled is not None:
            self.enabled = np.asarray(self.enabled, dtype=bool)

    def flags(self, l: int) -> np.ndarray:
        if self.enabled is None:
            return np.ones(l, dtype=bool)
        if len(self.enabled) != l:
            raise DimensionError(f"{len(self.enabled)} switching flags for {l} channels")
        return self.enabled


def threshold_xi(eta: float, nu, tau2):
    """
    :return: η·√(2ν²/(ν+1)³)·τ², the largest scale change accepted as adaptation rather than an outlier.
    """

    nu = np.asarray(nu, dtype=float)
    xi = eta * np.sqrt(2.0 * nu ** 2 / (nu + 1.0) ** 3) * np.asarray(tau2, dtype=float)
    return float(xi) if xi.ndim == 0 else xi


def predict_hyper(hyper: ChannelHyper) -> Tuple[np.ndarray, np.ndarray]:
    """
    Hyperparameter prediction. Channels with ρ < 1: ν⁻ = ρν + 1, τ²⁻ = ρτ². Channels with ρ = 1 are held.

    :return: Tuple: ν used in the update (equal to ν⁻), τ²⁻.
    """

    adaptive = hyper.adaptive
    nu = np.where(adaptive, hyper.rho * hyper.nu + 1.0, hyper.nu)
    tau2 = np.where(adaptive, hyper.rho * hyper.tau2, hyper.tau2)
    return nu, np.maximum(tau2, TAU2_FLOOR)


def _kinds(losses_kind: LossKinds, l: int) -> List[LossKind]:
    if isinstance(losses_kind, (str, LossKind)):
        return [LossKind.parse(losses_kind)] * l
    kinds = [LossKind.parse(k) for k in losses_kind]
    if len(kinds) != l:
        raise DimensionError(f"{len(kinds)} loss kinds for {l} channels")
    return kinds


def _adaptive_step(model: LinearModel, state: FilterState, hyper: ChannelHyper, u: Optional[np.ndarray],
                   y: np.ndarray, losses_kind: LossKinds, epsilon: float, m_iter: int,
                   cfg: Optional[Ar2Config]) -> Tuple[FilterState, StepDiagnostics, ChannelHyper]:
    n, m = model.n, model.m
    if len(hyper) != n + m:
        raise DimensionError(f"{len(hyper)} hyperparameters for {n} + {m} channels")
    kinds = _kinds(losses_kind, n + m)
    x_prior, P_prior = predict(model, state, u)
    nu_plus, tau2_prior = predict_hyper(hyper)
    losses = ChannelLosses([RobustLoss(kind, a, b) for kind, a, b in zip(kinds, nu_plus, tau2_prior)],
                           n_process=n)

    # Robust state update with the predicted hyperparameters.
    t, W, B_p, B_r = whiten(x_prior, P_prior, model.R, y, model.C)
    x_post, K, iterations, lam = robust_update(t, W, losses, x_prior, B_p, B_r, model.C, epsilon, m_iter)
    P_post = posterior_cov(P_prior, K, model.C, model.R)

    # Scale update from the posterior.
    e = t - W @ x_post
    wpw = np.einsum("ij,jk,ik->i", W, P_post, W)
    adaptive = hyper.adaptive
    candidate = tau2_prior + (e ** 2 + wpw) / nu_plus
    tau2_post = np.where(adaptive, np.maximum(candidate, TAU2_FLOOR), hyper.tau2)
    reverted = np.zeros(n + m, dtype=bool)
    if cfg is not None:
        xi = threshold_xi(cfg.eta, nu_plus, tau2_prior)
        reverted = adaptive & cfg.flags(n + m) & (np.abs(candidate - tau2_prior) > xi)
        tau2_post = np.where(reverted, hyper.tau2, tau2_post)
        if reverted.any():
            logger.debug("Reverted channels %s", np.flatnonzero(reverted))
    new_hyper = ChannelHyper(nu_plus, tau2_post, hyper.rho)

    diag = StepDiagnostics(iterations=iterations, innovation=y - model.C @ x_prior, lam=lam,
                           measurement_variance=measurement_variance(B_r, new_hyper.tau2[n:]), e=e,
                           reverted=reverted, wpw=wpw)
    return FilterState(x_post, P_post), diag, new_hyper


def ar1_step(model: LinearModel, state: FilterState, hyper: ChannelHyper, u: Optional[np.ndarray], y: np.ndarray,
             losses_kind: LossKinds = LossKind.student_log, epsilon: float = 0.01,
             m_iter: int = 4) -> Tuple[FilterState, StepDiagnostics, ChannelHyper]:
    """
    Robust filter step with variational adaptation of the channel scales.

    :param hyper: One entry per whitened channel (process channels first).
    :param losses_kind: One kind for all channels, or one per channel.

    :return: Tuple: the posterior state, diagnostics, the posterior hyperparameters.
    """

    return _adaptive_step(model, state, hyper, u, y, losses_kind, epsilon, m_iter, None)


def ar2_step(model: LinearModel, state: FilterState, hyper: ChannelHyper, cfg: Ar2Config, u: Optional[np.ndarray],
             y: np.ndarray, losses_kind: LossKinds = LossKind.student_log, epsilon: float = 0.01,
             m_iter: int = 4) -> Tuple[FilterState, StepDiagnostics, ChannelHyper]:
    """
    As `ar1_step`, but a channel whose scale would jump by more than ξ keeps its previous scale.
    """

    return _adaptive_step(model, state, hyper, u, y, losses_kind, epsilon, m_iter, cfg)


class AdaptiveEstimator(Estimator):
    """
    Robust filter with adaptive channel scales. With an Ar2Config, the switching rule is applied.
    """

    def __init__(self, model: LinearModel, hyper: ChannelHyper, losses_kind: LossKinds = LossKind.student_log,
                 epsilon: float = 0.01, m_iter: int = 4, switching: Optional[Ar2Config] = None,
                 x0: np.ndarray = None, P0: np.ndarray = None, name: str = ""):
        super().__init__(model, x0=x0, P0=P0, name=name or ("STKF-AR2" if switching else "STKF-AR1"))
        if len(hyper) != model.n + model.m:
            raise DimensionError(f"{len(hyper)} hyperparameters for {model.n} + {model.m} channels")
        self.initial_hyper = hyper.copy()
        self.hyper = hyper.copy()
        self.losses_kind = _kinds(losses_kind, len(hyper))
        self.epsilon = epsilon
        self.m_iter = m_iter
        self.switching = switching

    def clear_hyper(self) -> None:
        self.hyper = self.initial_hyper.copy()

    def update(self, u, y) -> StepDiagnostics:
        self.state, diag, self.hyper = _adaptive_step(self.model, self.state, self.hyper, u, y, self.losses_kind,
                                                      self.epsilon, self.m_iter, self.switching)
        return diag
