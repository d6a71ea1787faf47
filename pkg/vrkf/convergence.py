import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np
from scipy import integrate, linalg, optimize, stats

from vrkf.estimator import FilterState
from vrkf.exceptions import BoundError, DimensionError
from vrkf.kalman_estimator import kf_step, predict
from vrkf.losses import LOSS_FAMILIES, ChannelLosses, LossFamily, LossKind, StudentLog
from vrkf.robust_estimator import whiten
from vrkf.statespace import LinearModel
from vrkf.util import GAUSSIAN_NU

logger = logging.getLogger(__name__)

# The bracket of the ν root search.
NU_LOWER = 1e-9
NU_UPPER = 1e12
# Bisection tolerance in log ν.
LOG_NU_XTOL = 1e-12

_student = StudentLog()


@dataclass
class BoundInputs:
    """
    One whitened regression instance t = W x + e and the radius/contraction targets of the fixed-point iteration.

    :param W: l×n whitened regressor.
    :param t: l whitened data.
    :param tau2: l channel scales.
    :param gamma: The radius of the ‖x‖₁ ball the iteration must stay in.
    :param eta: The contraction target in (0, 1).
    """

    W: np.ndarray
    t: np.ndarray
    tau2: np.ndarray
    gamma: float = 1.0
    eta: float = 0.9

    def __post_init__(self):
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        self.t = np.atleast_1d(np.asarray(self.t, dtype=float)).reshape(-1)
        self.tau2 = np.broadcast_to(np.asarray(self.tau2, dtype=float), self.t.shape).copy()
        if self.W.shape[0] != len(self.t):
            raise DimensionError(f"W has {self.W.shape[0]} rows but t has {len(self.t)} entries")
        if np.any(self.tau2 <= 0):
            raise BoundError("tau2 must be positive")
        if not self.gamma > 0:
            raise BoundError(f"gamma must be positive, got {self.gamma}")
        if not 0 < self.eta < 1:
            raise BoundError(f"eta must be in (0, 1), got {self.eta}")

    @property
    def n(self) -> int:
        return self.W.shape[1]

    @property
    def l(self) -> int:
        return self.W.shape[0]

    @property
    def row_norms(self) -> np.ndarray:
        """
        :return: ‖w_i‖₁ per row.
        """

        return np.abs(self.W).sum(axis=1)

    def weighted_gram(self, d: np.ndarray) -> np.ndarray:
        return (self.W.T * d) @ self.W

    def with_targets(self, gamma: float = None, eta: float = None) -> "BoundInputs":
        return BoundInputs(self.W, self.t, self.tau2, self.gamma if gamma is None else gamma,
                           self.eta if eta is None else eta)


@dataclass
class TrackingPrediction:
    """
    The predicted behaviour of an adaptive channel scale with forgetting factor ρ.

    :param steady_mean: The steady-state mean of λ.
    :param steady_var: The steady-state variance of λ.
    :param time_constant: −1/ln ρ, in steps.
    :param transient: p ↦ δ₀ρᵖ for the δ₀ the prediction was built with.
    """

    steady_mean: float
    steady_var: float
    time_constant: float
    transient: Callable[[int], float] = field(repr=False)


def _lambda_min(gram: np.ndarray) -> float:
    values = linalg.eigvalsh(gram)
    scale = max(np.abs(values).max(), 1.0)
    if values[0] <= 1e-14 * scale:
        raise BoundError(f"The Gram matrix is singular (smallest eigenvalue {values[0]:.3g})")
    return float(values[0])


def _bound_weights(nu: float, inp: BoundInputs) -> np.ndarray:
    return _student.weight(inp.gamma * inp.row_norms + np.abs(inp.t), np.full(inp.l, float(nu)), inp.tau2)


def xi_lower_bound(inp: BoundInputs) -> float:
    """
    ξ = √n·Σ_i (1/τ_i²)|t_i|·‖w_i‖₁ / λ_min[Σ_i w_iᵀw_i/τ_i²], the limit of φ as ν → ∞.
    With unit scales this is the unweighted Gram form.

    :return: The smallest radius γ for which φ(ν) = γ has a solution.
    """

    w1 = inp.row_norms
    numerator = np.sqrt(inp.n) * np.sum(np.abs(inp.t) * w1 / inp.tau2)
    return float(numerator / _lambda_min(inp.weighted_gram(1.0 / inp.tau2)))


def phi(nu: float, inp: BoundInputs) -> float:
    """
    :return: √n·Σ_i (1/τ_i²)|t_i|·‖w_i‖₁ / λ_min[Σ_i d_ν(γ‖w_i‖₁ + |t_i|) w_iᵀw_i], a bound on ‖f(x)‖₁ over the γ ball.
    """

    w1 = inp.row_norms
    numerator = np.sqrt(inp.n) * np.sum(np.abs(inp.t) * w1 / inp.tau2)
    return float(numerator / _lambda_min(inp.weighted_gram(_bound_weights(nu, inp))))


def psi(nu: float, inp: BoundInputs) -> float:
    """
    :return: A bound on the 1-norm of the Jacobian of the fixed-point map over the γ ball.
    """

    w1 = inp.row_norms
    outer = np.array([np.linalg.norm(np.outer(w, w), 1) for w in inp.W])
    terms = (np.abs(inp.t) + inp.gamma * w1) / inp.tau2 ** 2 * w1 * (inp.gamma * outer + np.abs(inp.t) * w1)
    numerator = 2.0 * np.sqrt(inp.n) * np.sum(terms)
    return float(numerator / (nu * _lambda_min(inp.weighted_gram(_bound_weights(nu, inp)))))


def _solve_decreasing(fn: Callable[[float], float], target: float, label: str) -> float:
    """
    Solve fn(ν) = target for a decreasing fn by bisection in log ν.

    :return: ν with fn(ν) ≤ target, rounded up from the root.
    """

    if fn(NU_LOWER) <= target:
        return NU_LOWER
    if fn(NU_UPPER) > target:
        logger.warning("%s: no root below nu=%g; saturating", label, NU_UPPER)
        return NU_UPPER
    root = optimize.bisect(lambda s: fn(np.exp(s)) - target, np.log(NU_LOWER), np.log(NU_UPPER),
                           xtol=LOG_NU_XTOL, maxiter=200)
    return float(min(np.exp(root + 2 * LOG_NU_XTOL), NU_UPPER))


def solve_nu_star(inp: BoundInputs) -> float:
    """
    :return: ν* with φ(ν*) = γ. Any ν ≥ ν* keeps the iteration inside the γ ball.
    """

    xi = xi_lower_bound(inp)
    if inp.gamma <= xi:
        raise BoundError(f"gamma={inp.gamma:.6g} must exceed xi={xi:.6g}")
    return _solve_decreasing(lambda nu: phi(nu, inp), inp.gamma, "phi")


def solve_nu_plus(inp: BoundInputs) -> float:
    """
    :return: ν⁺ with ψ(ν⁺) = η. Any ν ≥ ν⁺ makes the fixed-point map a contraction.
    """

    return _solve_decreasing(lambda nu: psi(nu, inp), inp.eta, "psi")


def required_nu(inp: BoundInputs) -> float:
    """
    :return: max(ν*, ν⁺), a uniform ν that guarantees convergence of the fixed-point iteration.
    """

    return max(solve_nu_star(inp), solve_nu_plus(inp))


@dataclass
class ConditionResult:
    passed: bool
    # The worst grid point, {"nu", "tau2", "e", "value"}; None when the condition holds everywhere.
    witness: Optional[dict] = None
    detail: str = ""


@dataclass
class LossConditionReport:
    """
    Numerical check of the conditions under which a loss can be minimized by the fixed-point iteration:

    1. J is non-decreasing in |e| with its minimum at 0.
    2. 0 ≤ d ≤ 1/τ²; d increases with ν and vanishes as ν → 0⁺ for e ≠ 0.
    3. ι is bounded.
    """

    kind: str
    conditions: Dict[int, ConditionResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions.values())

    def __getitem__(self, i: int) -> ConditionResult:
        return self.conditions[i]


@dataclass
class LossGrid:
    nu: np.ndarray = field(default_factory=lambda: np.geomspace(0.05, 1000.0, 25))
    tau2: np.ndarray = field(default_factory=lambda: np.array([0.1, 1.0, 10.0]))
    e: np.ndarray = field(default_factory=lambda: np.linspace(-20.0, 20.0, 401))
    # ν used for the vanishing-weight limit.
    nu_small: float = 1e-6
    tol: float = 1e-12


def _witness(mask: np.ndarray, score: np.ndarray, nu, tau2, e) -> Optional[dict]:
    if not mask.any():
        return None
    idx = np.unravel_index(np.argmax(np.where(mask, score, -np.inf)), mask.shape)
    return {"nu": float(nu[idx]), "tau2": float(tau2[idx]), "e": float(e[idx]), "value": float(score[idx])}


def check_loss_conditions(loss: Union[str, LossKind, LossFamily], grid: LossGrid = None) -> LossConditionReport:
    """
    :param loss: A loss kind, or any LossFamily instance.
    :param grid: The (ν, τ², e) sample grid. ν values at or above the family's upper limit are dropped.

    :return: Pass/fail per condition with the worst-case grid point of each failure.
    """

    grid = grid or LossGrid()
    family = loss if isinstance(loss, LossFamily) else LOSS_FAMILIES[LossKind.parse(loss)]
    name = loss.value if isinstance(loss, LossKind) else (loss if isinstance(loss, str) else type(loss).__name__)
    nu_values = np.asarray(grid.nu, dtype=float)
    nu_values = np.sort(nu_values[nu_values < min(family.nu_upper, GAUSSIAN_NU)])
    e_values = np.sort(np.asarray(grid.e, dtype=float))
    # Axes: (ν, τ², e).
    nu, tau2, e = np.meshgrid(nu_values, np.asarray(grid.tau2, dtype=float), e_values, indexing="ij")
    tol = grid.tol

    with np.errstate(all="ignore"):
        J = np.asarray(family.value(e, nu, tau2))
        d = np.asarray(family.weight(e, nu, tau2))
        io = np.asarray(family.iota(e, nu, tau2))

    conditions = {}

    # 1: minimum at zero and non-decreasing in |e| on either side.
    J0 = np.asarray(family.value(np.zeros_like(e), nu, tau2))
    below_min = J < J0 - tol
    pos = e_values >= 0
    neg = e_values <= 0
    rise_pos = np.diff(J[..., pos], axis=-1)
    rise_neg = -np.diff(J[..., neg], axis=-1)
    decreasing = np.zeros_like(J, dtype=bool)
    decreasing[..., np.flatnonzero(pos)[1:]] |= rise_pos < -tol * (1 + np.abs(J[..., pos][..., 1:]))
    decreasing[..., np.flatnonzero(neg)[:-1]] |= rise_neg < -tol * (1 + np.abs(J[..., neg][..., :-1]))
    bad = below_min | decreasing | ~np.isfinite(J)
    conditions[1] = ConditionResult(passed=not bad.any(), witness=_witness(bad, np.abs(J - J0), nu, tau2, e),
                                    detail="J non-decreasing in |e| with minimum at 0")

    # 2: bounded weight, increasing in ν, vanishing as ν → 0⁺.
    out_of_range = (d < -tol) | (d > (1.0 + 1e-9) / tau2) | ~np.isfinite(d)
    excess = np.maximum(d * tau2 - 1.0, -d * tau2)
    not_increasing = np.zeros_like(d, dtype=bool)
    not_increasing[1:] = np.diff(d, axis=0) < -1e-9 * np.abs(d[1:])
    drop = -np.diff(d, axis=0, prepend=d[:1])
    passed = not (out_of_range.any() or not_increasing.any())
    witness = _witness(out_of_range, excess, nu, tau2, e) or _witness(not_increasing, drop, nu, tau2, e)
    if family.weight_vanishes_at_zero_nu:
        far = e_values[np.abs(e_values) >= 1.0]
        tau2_axis = np.asarray(grid.tau2, dtype=float)[:, None]
        d_small = np.asarray(family.weight(far[None, :], grid.nu_small, tau2_axis)) * tau2_axis
        if np.any(d_small >= 1e-2):
            passed = False
            i, j = np.unravel_index(np.argmax(d_small), d_small.shape)
            witness = witness or {"nu": grid.nu_small, "tau2": float(tau2_axis[i, 0]), "e": float(far[j]),
                                  "value": float(d_small[i, j])}
    conditions[2] = ConditionResult(passed=passed, witness=witness,
                                    detail="0 <= d <= 1/tau2, increasing in nu, vanishing as nu -> 0")

    # 3: ι bounded.
    unbounded = ~np.isfinite(io)
    conditions[3] = ConditionResult(passed=not unbounded.any(),
                                    witness=_witness(unbounded, np.ones_like(io), nu, tau2, e),
                                    detail=f"iota bounded (max |iota| = {np.nanmax(np.abs(io)):.3g})")
    for i, c in conditions.items():
        if not c.passed:
            logger.info("%s fails condition %d at %s", name, i, c.witness)
    return LossConditionReport(kind=name, conditions=conditions)


def _check_rho(rho: float) -> None:
    if not 0 < rho < 1:
        raise BoundError(f"rho must be in (0, 1), got {rho}")


def steady_dof(rho: float) -> float:
    """
    :return: 1/(1−ρ), the fixed point of ν ← ρν + 1.
    """

    _check_rho(rho)
    return 1.0 / (1.0 - rho)


def time_constant(rho: float) -> float:
    """
    :return: −1/ln ρ in steps. Multiply by dt for seconds.
    """

    _check_rho(rho)
    return float(-1.0 / np.log(rho))


def transient(delta0: float, rho: float, p: int) -> float:
    """
    :return: δ₀ρᵖ, the expected tracking error p steps after a variance jump of δ₀.
    """

    _check_rho(rho)
    if p < 0:
        raise BoundError(f"p must be non-negative, got {p}")
    return float(delta0 * rho ** p)


def steady_lambda_stats(rho: float, sigma_g: float, wpw: float = 0.0, delta0: float = 0.0) -> TrackingPrediction:
    """
    :param rho: The forgetting factor.
    :param sigma_g: The true noise variance of the channel.
    :param wpw: The posterior term w P wᵀ of the channel.
    :param delta0: The initial tracking error for the transient.

    :return: Steady mean Σ_g + 2wPw and variance 2(1−ρ)Σ²/(1+ρ) with Σ = Σ_g + wPw.
    """

    _check_rho(rho)
    if not sigma_g > 0:
        raise BoundError(f"sigma_g must be positive, got {sigma_g}")
    if wpw < 0:
        raise BoundError(f"wpw must be non-negative, got {wpw}")
    sigma = sigma_g + wpw
    return TrackingPrediction(steady_mean=sigma_g + 2.0 * wpw,
                              steady_var=2.0 * (1.0 - rho) * sigma ** 2 / (1.0 + rho),
                              time_constant=time_constant(rho),
                              transient=lambda p: transient(delta0, rho, p))


def predicted_lambda_trace(sigma_g: Sequence[float], rho: float, wpw: float = 0.0,
                           lam0: float = None) -> np.ndarray:
    """
    E[λ_k] = ρE[λ_{k−1}] + (1−ρ)(Σ_g,k + 2wPw).

    :param sigma_g: The true variance per step.
    :param lam0: The initial expectation. Defaults to the first target.

    :return: The expected trace, one entry per step.
    """

    _check_rho(rho)
    target = np.asarray(sigma_g, dtype=float) + 2.0 * wpw
    out = np.empty_like(target)
    prev = target[0] if lam0 is None else lam0
    for k, g in enumerate(target):
        prev = rho * prev + (1.0 - rho) * g
        out[k] = prev
    return out


def laplace_gaussian(nu: float, tau2: float):
    """
    The Gaussian approximation of Inv-Gamma(ν/2, ντ²/2) expanded at λ₀ = ντ²/(ν+1).

    :return: Tuple: μ = τ², σ² = 2ν²τ⁴/(ν+1)³.
    """

    if not nu > 0 or not tau2 > 0:
        raise BoundError(f"nu and tau2 must be positive, got {nu}, {tau2}")
    return float(tau2), float(2.0 * nu ** 2 * tau2 ** 2 / (nu + 1.0) ** 3)


def laplace_kl(nu: float, tau2: float) -> float:
    """
    :return: KL(Inv-Gamma(ν/2, ντ²/2) ‖ N(μ, σ²)) by quadrature, with (μ, σ²) from `laplace_gaussian`.
    """

    mu, var = laplace_gaussian(nu, tau2)
    p = stats.invgamma(a=nu / 2.0, scale=nu * tau2 / 2.0)
    q = stats.norm(loc=mu, scale=np.sqrt(var))
    lo, hi = p.ppf(1e-12), p.ppf(1.0 - 1e-12)

    def integrand(lam):
        lp = p.logpdf(lam)
        return np.exp(lp) * (lp - q.logpdf(lam))

    value, _ = integrate.quad(integrand, lo, hi, points=[p.median(), mu], limit=400)
    return float(value)


@dataclass
class BoundScan:
    """
    Per-step bounds along a trajectory. `satisfied[k, i]` is True when channel i's configured ν reaches the
    requirement of step k.
    """

    xi: np.ndarray
    nu_star: np.ndarray
    nu_plus: np.ndarray
    nu_configured: np.ndarray
    satisfied: np.ndarray
    gamma_scale: float
    eta: float

    @property
    def required(self) -> np.ndarray:
        return np.maximum(self.nu_star, self.nu_plus)

    @property
    def worst_step(self) -> int:
        return int(np.argmax(self.required))

    @property
    def worst_required(self) -> float:
        return float(self.required.max())


def scan_bounds(model: LinearModel, measurements: np.ndarray, channels: ChannelLosses = None,
                gamma_scale: float = 2.0, eta: float = 0.9, x0: np.ndarray = None, P0: np.ndarray = None,
                inputs: np.ndarray = None) -> BoundScan:
    """
    Run the standard filter over the measurements, whiten each step and evaluate ξ, ν*, ν⁺ there.

    :param model: The nominal model.
    :param measurements: N×m measurements.
    :param channels: The configured per-channel losses. Gaussian unit-scale channels if None.
    :param gamma_scale: γ = gamma_scale·ξ per step.
    :param eta: The contraction target.

    :return: The per-step bounds.
    """

    if gamma_scale <= 1:
        raise BoundError(f"gamma_scale must exceed 1, got {gamma_scale}")
    measurements = np.atleast_2d(np.asarray(measurements, dtype=float))
    n, m = model.n, model.m
    if measurements.shape[1] != m:
        raise DimensionError(f"Measurements have {measurements.shape[1]} columns, expected {m}")
    if channels is None:
        nu_cfg, tau2 = np.full(n + m, GAUSSIAN_NU), np.ones(n + m)
    else:
        channels.check_dimensions(n, m)
        nu_cfg, tau2 = channels.nu, channels.tau2
    state = FilterState(np.zeros(n) if x0 is None else x0, np.eye(n) if P0 is None else P0)
    steps = len(measurements)
    xi, nu_star, nu_plus = np.empty(steps), np.empty(steps), np.empty(steps)
    for k, y in enumerate(measurements):
        u = None if inputs is None else inputs[k]
        x_prior, P_prior = predict(model, state, u)
        t, W, _, _ = whiten(x_prior, P_prior, model.R, y, model.C)
        inp = BoundInputs(W, t, tau2, gamma=1.0, eta=eta)
        xi[k] = xi_lower_bound(inp)
        inp = inp.with_targets(gamma=max(gamma_scale * xi[k], np.finfo(float).tiny))
        nu_star[k] = solve_nu_star(inp)
        nu_plus[k] = solve_nu_plus(inp)
        state, _ = kf_step(model, state, u, y)
    required = np.maximum(nu_star, nu_plus)
    satisfied = nu_cfg[None, :] >= required[:, None]
    return BoundScan(xi=xi, nu_star=nu_star, nu_plus=nu_plus, nu_configured=nu_cfg, satisfied=satisfied,
                     gamma_scale=gamma_scale, eta=eta)
