import numpy as np
import pytest

from vrkf.convergence import (BoundInputs, LossGrid, check_loss_conditions, laplace_gaussian, laplace_kl, phi,
                              predicted_lambda_trace, psi, required_nu, scan_bounds, solve_nu_plus, solve_nu_star,
                              steady_dof, steady_lambda_stats, time_constant, transient, xi_lower_bound)
from vrkf.exceptions import BoundError, DimensionError
from vrkf.losses import ChannelLosses, LossFamily, LossKind, RobustLoss
from vrkf.robust_estimator import fixed_point_solve
from vrkf.statespace import FixedGaussian, simulate


def _unit_inputs(t=2.0, gamma=3.0, eta=0.9) -> BoundInputs:
    return BoundInputs(W=[[1.0]], t=[t], tau2=1.0, gamma=gamma, eta=eta)


def test_xi_lower_bound():
    assert xi_lower_bound(_unit_inputs()) == pytest.approx(2.0)
    assert xi_lower_bound(_unit_inputs(t=0.0)) == 0.0
    assert xi_lower_bound(_unit_inputs(t=-6.0)) == pytest.approx(6.0)
    W = np.array([[1.0, 0.5], [0.0, 2.0], [1.0, -1.0]])
    t = np.array([0.3, -1.2, 2.0])
    base = xi_lower_bound(BoundInputs(W, t, 1.0))
    assert xi_lower_bound(BoundInputs(W, 3.0 * t, 1.0)) == pytest.approx(3.0 * base)


def test_xi_lower_bound_weights_the_gram_by_channel_scale():
    # Numerator 2/2, Gram 1/2 + 1/1. The unweighted Gram would give 1/2.
    inp = BoundInputs(W=[[1.0], [1.0]], t=[2.0, 0.0], tau2=[2.0, 1.0], gamma=3.0)
    assert xi_lower_bound(inp) == pytest.approx(2.0 / 3.0)
    assert phi(1e12, inp) == pytest.approx(xi_lower_bound(inp), abs=1e-6)
    scaled = BoundInputs(W=inp.W, t=inp.t, tau2=4.0 * inp.tau2, gamma=3.0)
    assert xi_lower_bound(scaled) == pytest.approx(2.0 / 3.0)


def test_phi_tends_to_xi():
    inp = _unit_inputs()
    # With w = 1, t = 2, γ = 3: φ(ν) = 2 + 50/ν.
    assert phi(50.0, inp) == pytest.approx(3.0)
    assert phi(1e12, inp) == pytest.approx(2.0, abs=1e-6)
    assert phi(1e-9, inp) > 1e6


def test_solve_nu_star():
    inp = _unit_inputs()
    nu_star = solve_nu_star(inp)
    assert nu_star == pytest.approx(50.0, rel=1e-6)
    assert phi(nu_star, inp) <= 3.0 + 1e-9
    assert phi(nu_star, inp) == pytest.approx(3.0, abs=1e-6)


def test_solve_nu_star_near_xi():
    assert solve_nu_star(_unit_inputs(gamma=2.0 * (1.0 + 1e-12))) > 1e6
    with pytest.raises(BoundError):
        solve_nu_star(_unit_inputs(gamma=2.0))
    with pytest.raises(BoundError):
        solve_nu_star(_unit_inputs(gamma=1.0))


def test_psi():
    inp = _unit_inputs()
    for nu in (0.5, 5.0, 500.0):
        assert psi(2.0 * nu, inp) < psi(nu, inp)
    assert psi(1e12, inp) < 1e-6 * psi(1.0, inp)
    nu_plus = solve_nu_plus(inp)
    assert psi(nu_plus, inp) == pytest.approx(0.9, rel=1e-6)
    assert required_nu(inp) == max(solve_nu_star(inp), nu_plus)


def test_bound_inputs_validation():
    with pytest.raises(DimensionError):
        BoundInputs(W=np.eye(2), t=[1.0, 2.0, 3.0], tau2=1.0)
    with pytest.raises(BoundError):
        BoundInputs(W=[[1.0]], t=[1.0], tau2=0.0)
    with pytest.raises(BoundError):
        BoundInputs(W=[[1.0]], t=[1.0], tau2=1.0, eta=1.0)
    with pytest.raises(BoundError):
        xi_lower_bound(BoundInputs(W=[[1.0, 1.0]], t=[1.0], tau2=1.0))


def test_fixed_point_contracts_inside_the_ball():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        W = rng.standard_normal((4, 2))
        t = rng.standard_normal(4)
        inp = BoundInputs(W, t, 1.0, eta=0.9)
        gamma = 2.0 * xi_lower_bound(inp)
        inp = inp.with_targets(gamma=gamma)
        nu = 2.0 * required_nu(inp)
        losses = ChannelLosses([RobustLoss("student_log", nu) for _ in range(4)])
        direction = rng.standard_normal(2)
        x0 = 0.5 * gamma * direction / np.abs(direction).sum()
        history = fixed_point_solve(W, t, losses, x0, m_iter=200).history
        steps = [np.abs(b - a).sum() for a, b in zip(history, history[1:])]
        for before, after in zip(steps, steps[1:]):
            if before > 1e-12:
                assert after < before
        assert all(np.abs(x).sum() <= gamma * (1 + 1e-9) for x in history[1:])


@pytest.mark.parametrize("kind", list(LossKind))
def test_shipped_losses_satisfy_the_conditions(kind):
    report = check_loss_conditions(kind)
    assert report.passed, report.conditions
    assert sorted(report.conditions) == [1, 2, 3]


class _UnboundedWeight(LossFamily):
    """
    d = e: negative on one side and above 1/τ² for large |e|.
    """

    def _value(self, e, nu, tau2):
        return np.abs(e) ** 3 / 3.0

    def _weight(self, e, nu, tau2):
        return e

    def _iota(self, e, nu, tau2):
        return 1.0 / e


def test_bad_weight_is_reported_with_a_witness():
    report = check_loss_conditions(_UnboundedWeight(), LossGrid(e=np.linspace(-5.0, 5.0, 41)))
    assert not report.passed
    assert report[1].passed
    assert not report[2].passed
    assert report[2].witness is not None
    assert report.kind == "_UnboundedWeight"


def test_forgetting_factor_predictions():
    assert steady_dof(0.99) == pytest.approx(100.0)
    assert steady_dof(0.5) == pytest.approx(2.0)
    assert time_constant(0.99) == pytest.approx(99.499, abs=1e-3)
    assert transient(2.4, 0.98, 50) == pytest.approx(0.873, rel=0.02)
    assert transient(2.4, 0.98, 0) == 2.4
    for bad in (0.0, 1.0, 1.5):
        with pytest.raises(BoundError):
            steady_dof(bad)
    with pytest.raises(BoundError):
        transient(1.0, 0.9, -1)


def test_steady_lambda_stats():
    prediction = steady_lambda_stats(0.99, 1.0)
    assert prediction.steady_mean == 1.0
    assert prediction.steady_var == pytest.approx(0.01005, rel=1e-3)
    assert steady_lambda_stats(0.99, 1.0, wpw=0.1).steady_mean == pytest.approx(1.2)
    with_delta = steady_lambda_stats(0.98, 0.1, delta0=2.4)
    assert with_delta.transient(50) == pytest.approx(transient(2.4, 0.98, 50))
    assert with_delta.time_constant == pytest.approx(time_constant(0.98))
    with pytest.raises(BoundError):
        steady_lambda_stats(0.99, 0.0)
    with pytest.raises(BoundError):
        steady_lambda_stats(0.99, 1.0, wpw=-0.1)


def test_predicted_lambda_trace():
    flat = predicted_lambda_trace(np.full(10, 0.1), 0.9)
    np.testing.assert_allclose(flat, 0.1)
    sigma = np.concatenate([np.full(50, 0.1), np.full(500, 2.5)])
    trace = predicted_lambda_trace(sigma, 0.98)
    assert trace[50] == pytest.approx(0.98 * 0.1 + 0.02 * 2.5)
    np.testing.assert_allclose(trace[50 + 100] - 2.5, (0.1 - 2.5) * 0.98 ** 101, rtol=1e-9)
    assert trace[-1] == pytest.approx(2.5, abs=1e-3)
    assert predicted_lambda_trace([1.0], 0.5, wpw=0.25, lam0=0.0)[0] == pytest.approx(0.75)


def test_laplace_approximation():
    mu, var = laplace_gaussian(100.0, 1.0)
    assert mu == 1.0
    assert var == pytest.approx(2.0 * 100.0 ** 2 / 101.0 ** 3)
    assert var == pytest.approx(0.019412, rel=1e-4)
    assert laplace_gaussian(100.0, 3.0)[1] == pytest.approx(9.0 * var)
    assert laplace_kl(100.0, 1.0) < laplace_kl(10.0, 1.0)
    assert laplace_kl(100.0, 1.0) >= 0.0
    with pytest.raises(BoundError):
        laplace_gaussian(0.0, 1.0)


def test_scan_bounds(scalar_model):
    trajectory = simulate(scalar_model, FixedGaussian([[1.0]]), FixedGaussian([[1.0]]), 30, seed=9)
    scan = scan_bounds(scalar_model, trajectory.measurements, gamma_scale=2.0, eta=0.9)
    assert scan.xi.shape == scan.nu_star.shape == scan.nu_plus.shape == (30,)
    assert np.all(scan.xi > 0)
    assert np.all(scan.required >= scan.nu_star)
    assert scan.satisfied.shape == (30, 2)
    assert scan.worst_required == scan.required[scan.worst_step]

    channels = ChannelLosses([RobustLoss("student_log", 1e-6), RobustLoss("student_log", 1e-6)], n_process=1)
    tiny = scan_bounds(scalar_model, trajectory.measurements, channels)
    assert not tiny.satisfied.any()
    with pytest.raises(BoundError):
        scan_bounds(scalar_model, trajectory.measurements, gamma_scale=1.0)
    with pytest.raises(DimensionError):
        scan_bounds(scalar_model, np.ones((5, 2)))
