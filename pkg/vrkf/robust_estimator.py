import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import linalg

from vrkf.estimator import Estimator, FilterState, StepDiagnostics, check_iterate
from vrkf.exceptions import CovarianceError
from vrkf.kalman_estimator import gain, posterior_cov, predict
from vrkf.losses import ChannelLosses
from vrkf.statespace import LinearModel

logger = logging.getLogger(__name__)

# Weights are clipped here so that a rejected channel gets a huge but finite variance.
WEIGHT_FLOOR = 1e-12


def sqrt_factor(M: np.ndarray, name: str = "matrix") -> Tuple[np.ndarray, bool]:
    """
    :param M: A symmetric positive-definite matrix.
    :param name: Used in error messages.

    :return: Tuple: A factor B with B Bᵀ = M, and True if B is the lower Cholesky factor.
    """

    try:
        return linalg.cholesky(M, lower=True), True
    except linalg.LinAlgError:
        pass
    # Symmetric eigen square root.
    values, vectors = linalg.eigh(M)
    if values[0] <= 0:
        raise CovarianceError(f"{name} is not positive-definite (smallest eigenvalue {values[0]:.3g})")
    logger.warning("Cholesky factorization of %s failed; using the eigen square root", name)
    return vectors * np.sqrt(values), False


def _solve_factor(B: np.ndarray, lower: bool, b: np.ndarray) -> np.ndarray:
    if lower:
        return linalg.solve_triangular(B, b, lower=True)
    return linalg.solve(B, b)


def whiten(x_prior: np.ndarray, P_prior: np.ndarray, R_star: np.ndarray, y: np.ndarray,
           C: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Stack the prior and the measurement into one regression with identity nominal noise.

    :param x_prior: The prior mean.
    :param P_prior: The prior covariance.
    :param R_star: The nominal measurement covariance.
    :param y: The measurement.
    :param C: The observation matrix.

    :return: Tuple: t = blockdiag(B_p, B_r)⁻¹(x̂⁻; y), W = blockdiag(B_p, B_r)⁻¹(I; C), B_p, B_r.
    """

    B_p, p_lower = sqrt_factor(P_prior, "P⁻")
    B_r, r_lower = sqrt_factor(R_star, "R*")
    n = len(x_prior)
    t = np.concatenate([_solve_factor(B_p, p_lower, x_prior), _solve_factor(B_r, r_lower, y)])
    W = np.vstack([_solve_factor(B_p, p_lower, np.eye(n)), _solve_factor(B_r, r_lower, C)])
    return t, W, B_p, B_r


def robust_update(t: np.ndarray, W: np.ndarray, losses: ChannelLosses, x_prior: np.ndarray, B_p: np.ndarray,
                  B_r: np.ndarray, C: np.ndarray, epsilon: float = 0.01,
                  m_iter: int = 4) -> Tuple[np.ndarray, np.ndarray, int, np.ndarray]:
    """
    Fixed-point iteration of the reweighted Kalman update. Each pass evaluates the weights at the previous iterate,
    inflates the prior and measurement covariances by 1/d, and recomputes the gain.

    :param t: Whitened data.
    :param W: Whitened regressor.
    :param losses: One loss per whitened channel.
    :param x_prior: The prior mean; also the first iterate.
    :param B_p: Prior covariance factor.
    :param B_r: Nominal measurement covariance factor.
    :param C: Observation matrix.
    :param epsilon: Stop when ‖x_t − x_{t−1}‖ ≤ epsilon·‖x_t‖.
    :param m_iter: Maximum number of passes.

    :return: Tuple: The posterior mean, the final gain, the number of passes, λ = 1/d per channel.
    """

    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if m_iter < 1:
        raise ValueError(f"m_iter must be at least 1, got {m_iter}")
    n = len(x_prior)
    losses.check_dimensions(n, C.shape[0])
    innovation = B_r @ t[n:] - C @ x_prior
    x = x_prior
    K = None
    lam = None
    iterations = 0
    for iterations in range(1, m_iter + 1):
        d = np.maximum(losses.weights(t - W @ x), WEIGHT_FLOOR)
        lam = 1.0 / d
        P_tilde = (B_p * lam[:n]) @ B_p.T
        R_tilde = (B_r * lam[n:]) @ B_r.T
        K = gain(P_tilde, C, R_tilde)
        x_next = x_prior + K @ innovation
        check_iterate(x_next)
        converged = np.linalg.norm(x_next - x) <= epsilon * np.linalg.norm(x_next)
        x = x_next
        if converged:
            break
    return x, K, iterations, lam


def measurement_variance(B_r: np.ndarray, lam_r: np.ndarray) -> np.ndarray:
    """
    :return: diag(B_r diag(λ) B_rᵀ), the per-measurement variance in physical units.
    """

    return np.einsum("ij,j,ij->i", B_r, lam_r, B_r)


def stkf_step(model: LinearModel, state: FilterState, u: Optional[np.ndarray], y: np.ndarray,
              losses: ChannelLosses, epsilon: float = 0.01, m_iter: int = 4,
              R_star: np.ndarray = None) -> Tuple[FilterState, StepDiagnostics]:
    """
    One step of the robust filter: predict, whiten, fixed-point update, then the posterior covariance once.

    :param R_star: The nominal measurement covariance used for whitening. Defaults to model.R.
    """

    R_star = model.R if R_star is None else R_star
    x_prior, P_prior = predict(model, state, u)
    t, W, B_p, B_r = whiten(x_prior, P_prior, R_star, y, model.C)
    x_post, K, iterations, lam = robust_update(t, W, losses, x_prior, B_p, B_r, model.C, epsilon, m_iter)
    P_post = posterior_cov(P_prior, K, model.C, model.R)
    diag = StepDiagnostics(iterations=iterations, innovation=y - model.C @ x_prior, lam=lam,
                           measurement_variance=measurement_variance(B_r, lam[model.n:]), e=t - W @ x_post)
    return FilterState(x_post, P_post), diag


@dataclass
class FixedPointResult:
    x: np.ndarray
    iterations: int
    history: List[np.ndarray] = field(default_factory=list)


def fixed_point_solve(W: np.ndarray, t: np.ndarray, losses: ChannelLosses, x0: np.ndarray, epsilon: float = 1e-12,
                      m_iter: int = 100, scales: np.ndarray = None) -> FixedPointResult:
    """
    Minimize Σ_i s_i·J_i(t_i − w_i x) by x ← (Wᵀ D W)⁻¹ Wᵀ D t with D = diag(s·d(t − W x)).
    This is the regression form of `robust_update`, started from an arbitrary point.

    :param W: l×n regressor.
    :param t: l data.
    :param losses: One loss per row.
    :param x0: The first iterate.
    :param epsilon: Relative step tolerance.
    :param m_iter: Maximum number of passes.
    :param scales: Optional positive multiplier per loss term.

    :return: The final iterate, the pass count and every iterate from x0 on.
    """

    scales = np.ones(len(t)) if scales is None else np.asarray(scales, dtype=float)
    x = np.asarray(x0, dtype=float)
    history = [x]
    iterations = 0
    for iterations in range(1, m_iter + 1):
        d = scales * np.maximum(losses.weights(t - W @ x), WEIGHT_FLOOR)
        WtD = W.T * d
        x_next = linalg.solve(WtD @ W, WtD @ t, assume_a="pos")
        check_iterate(x_next)
        history.append(x_next)
        converged = np.linalg.norm(x_next - x) <= epsilon * np.linalg.norm(x_next)
        x = x_next
        if converged:
            break
    return FixedPointResult(x=x, iterations=iterations, history=history)


class RobustEstimator(Estimator):
    """
    Robust filter with fixed per-channel losses.
    """

    def __init__(self, model: LinearModel, losses: ChannelLosses, epsilon: float = 0.01, m_iter: int = 4,
                 x0: np.ndarray = None, P0: np.ndarray = None, name: str = "STKF"):
        super().__init__(model, x0=x0, P0=P0, name=name)
        losses.check_dimensions(model.n, model.m)
        self.losses = losses
        self.epsilon = epsilon
        self.m_iter = m_iter

    def update(self, u, y) -> StepDiagnostics:
        self.state, diag = stkf_step(self.model, self.state, u, y, self.losses, self.epsilon, self.m_iter)
        return diag
