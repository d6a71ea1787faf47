from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from vrkf.estimator import ChannelHyper, Estimator, FilterState, StepDiagnostics, TAU2_FLOOR, check_iterate
from vrkf.exceptions import DimensionError
from vrkf.kalman_estimator import gain, posterior_cov, predict
from vrkf.robust_estimator import measurement_variance, sqrt_factor
from vrkf.statespace import LinearModel


def _variational_update(model: LinearModel, x_prior: np.ndarray, P_prior: np.ndarray, y: np.ndarray,
                        nu: np.ndarray, tau2: np.ndarray, n_iter: int):
    """
    Alternate the state update with measurement variances λ and the update of λ from the posterior, n_iter times.
    The posterior covariance is recomputed inside the loop.

    :return: Tuple: posterior mean, posterior covariance, final λ, whitened residual, [W P Wᵀ]_ii, B_r.
    """

    if n_iter < 1:
        raise ValueError(f"The iteration count must be at least 1, got {n_iter}")
    C = model.C
    B_r, lower = sqrt_factor(model.R, "R")
    if lower:
        W_r = linalg.solve_triangular(B_r, C, lower=True)
        t_r = linalg.solve_triangular(B_r, y, lower=True)
    else:
        W_r = linalg.solve(B_r, C)
        t_r = linalg.solve(B_r, y)
    innovation = y - C @ x_prior
    lam = tau2.copy()
    x_post = x_prior
    P_post = P_prior
    e = wpw = None
    for _ in range(n_iter):
        R_tilde = (B_r * lam) @ B_r.T
        K = gain(P_prior, C, R_tilde)
        x_post = x_prior + K @ innovation
        check_iterate(x_post)
        P_post = posterior_cov(P_prior, K, C, R_tilde)
        e = t_r - W_r @ x_post
        wpw = np.einsum("ij,jk,ik->i", W_r, P_post, W_r)
        lam = np.maximum((nu * tau2 + e ** 2 + wpw) / (nu + 1.0), TAU2_FLOOR)
    return x_post, P_post, lam, e, wpw, B_r


def vbkf_fixed_step(model: LinearModel, state: FilterState, u: Optional[np.ndarray], y: np.ndarray,
                    nu: np.ndarray, tau2: np.ndarray, n_iter: int = 4) -> Tuple[FilterState, StepDiagnostics]:
    """
    Variational Bayes update with a fixed inverse-Gamma prior on each measurement variance.
    The prior Inv-Gamma(a, b) corresponds to ν = 2a, τ² = b/a.

    :param nu: ν per measurement channel.
    :param tau2: τ² per measurement channel.
    :param n_iter: Number of coupled iterations.
    """

    m = model.m
    nu = np.broadcast_to(np.asarray(nu, dtype=float), (m,))
    tau2 = np.broadcast_to(np.asarray(tau2, dtype=float), (m,))
    x_prior, P_prior = predict(model, state, u)
    x_post, P_post, lam, e, wpw, B_r = _variational_update(model, x_prior, P_prior, y, nu, tau2, n_iter)
    diag = StepDiagnostics(iterations=n_iter, innovation=y - model.C @ x_prior,
                           lam=np.concatenate([np.ones(model.n), lam]),
                           measurement_variance=measurement_variance(B_r, lam), e=e, wpw=wpw)
    return FilterState(x_post, P_post), diag


def vbkf_step(model: LinearModel, state: FilterState, hyper: ChannelHyper, u: Optional[np.ndarray], y: np.ndarray,
              n_iter: int = 4) -> Tuple[FilterState, StepDiagnostics, ChannelHyper]:
    """
    Adaptive variational Bayes step. The measurement hyperparameters are discounted by ρ before the update
    (shape ν/2 and rate ντ²/2 both scaled by ρ, so τ² carries over) and gain one degree of freedom after it.
    Process noise is treated as exactly Gaussian.

    :param hyper: One entry per measurement channel.
    """

    if len(hyper) != model.m:
        raise DimensionError(f"{len(hyper)} measurement hyperparameters for {model.m} channels")
    x_prior, P_prior = predict(model, state, u)
    nu_prior = hyper.rho * hyper.nu
    x_post, P_post, lam, e, wpw, B_r = _variational_update(model, x_prior, P_prior, y, nu_prior, hyper.tau2,
                                                           n_iter)
    new_hyper = ChannelHyper(nu_prior + 1.0, lam, hyper.rho)
    diag = StepDiagnostics(iterations=n_iter, innovation=y - model.C @ x_prior,
                           lam=np.concatenate([np.ones(model.n), lam]),
                           measurement_variance=measurement_variance(B_r, lam), e=e, wpw=wpw)
    return FilterState(x_post, P_post), diag, new_hyper


class VariationalFixedEstimator(Estimator):

    def __init__(self, model: LinearModel, nu: np.ndarray, tau2: np.ndarray, n_iter: int = 4,
                 x0: np.ndarray = None, P0: np.ndarray = None, name: str = "VBKF-fixed"):
        super().__init__(model, x0=x0, P0=P0, name=name)
        self.nu = np.broadcast_to(np.asarray(nu, dtype=float), (model.m,)).copy()
        self.tau2 = np.broadcast_to(np.asarray(tau2, dtype=float), (model.m,)).copy()
        self.n_iter = n_iter

    def update(self, u, y) -> StepDiagnostics:
        self.state, diag = vbkf_fixed_step(self.model, self.state, u, y, self.nu, self.tau2, self.n_iter)
        return diag


class VariationalEstimator(Estimator):
    """
    Adaptive variational Bayes filter with a forgetting factor on the measurement variances.
    """

    def __init__(self, model: LinearModel, hyper: ChannelHyper, n_iter: int = 4,
                 x0: np.ndarray = None, P0: np.ndarray = None, name: str = "VBKF"):
        super().__init__(model, x0=x0, P0=P0, name=name)
        if len(hyper) != model.m:
            raise DimensionError(f"{len(hyper)} measurement hyperparameters for {model.m} channels")
        self.initial_hyper = hyper.copy()
        self.hyper = hyper.copy()
        self.n_iter = n_iter

    def clear_hyper(self) -> None:
        self.hyper = self.initial_hyper.copy()

    def update(self, u, y) -> StepDiagnostics:
        self.state, diag, self.hyper = vbkf_step(self.model, self.state, self.hyper, u, y, self.n_iter)
        return diag
