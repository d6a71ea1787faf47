from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from vrkf.estimator import Estimator, FilterState, StepDiagnostics, check_iterate
from vrkf.exceptions import CovarianceError
from vrkf.statespace import LinearModel
from vrkf.util import symmetrize


def predict(model: LinearModel, state: FilterState, u: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    :return: The prior mean A x̂ + B_u u and covariance A P Aᵀ + Q.
    """

    x_prior = model.A @ state.x
    if u is not None and model.B_u is not None:
        x_prior = x_prior + model.B_u @ np.asarray(u, dtype=float).reshape(-1)
    P_prior = symmetrize(model.A @ state.P @ model.A.T + model.Q)
    return x_prior, P_prior


def gain(P_prior: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """
    :return: P⁻Cᵀ(C P⁻Cᵀ + R)⁻¹.
    """

    S = symmetrize(C @ P_prior @ C.T + R)
    try:
        return linalg.solve(S, C @ P_prior, assume_a="pos").T
    except (linalg.LinAlgError, ValueError):
        raise CovarianceError("Innovation covariance is not invertible")


def posterior_cov(P_prior: np.ndarray, K: np.ndarray, C: np.ndarray, R: np.ndarray) -> np.ndarray:
    """
    Joseph form: (I − K C) P⁻ (I − K C)ᵀ + K R Kᵀ, symmetrized.
    """

    I_KC = np.eye(P_prior.shape[0]) - K @ C
    return symmetrize(I_KC @ P_prior @ I_KC.T + K @ R @ K.T)


def kf_step(model: LinearModel, state: FilterState, u: Optional[np.ndarray],
            y: np.ndarray) -> Tuple[FilterState, StepDiagnostics]:
    """
    One step of the standard Kalman filter.
    """

    x_prior, P_prior = predict(model, state, u)
    K = gain(P_prior, model.C, model.R)
    innovation = y - model.C @ x_prior
    x_post = x_prior + K @ innovation
    check_iterate(x_post)
    diag = StepDiagnostics(iterations=1, innovation=innovation, lam=np.ones(model.n + model.m),
                           measurement_variance=np.diag(model.R).copy())
    return FilterState(x_post, posterior_cov(P_prior, K, model.C, model.R)), diag


class KalmanEstimator(Estimator):

    def update(self, u, y) -> StepDiagnostics:
        self.state, diag = kf_step(self.model, self.state, u, y)
        return diag
