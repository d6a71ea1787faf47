import numpy as np
import pytest

from vrkf.exceptions import LossError
from vrkf.losses import (ChannelLosses, LOSS_FAMILIES, LossKind, RobustLoss, convexity_boundary, gaussian_loss,
                         influence, iota, loss_value, weight)
from vrkf.robust_estimator import fixed_point_solve

# (kind, ν values) covering each family's admissible range.
GRID = [(LossKind.student_log, [0.5, 1.0, 4.0, 100.0]),
        (LossKind.exponential_welsch, [0.5, 1.0, 4.0, 100.0]),
        (LossKind.power_family, [0.5, 1.0, 1.5, 1.9]),
        (LossKind.square_root, [0.5, 1.0, 4.0, 100.0])]
E_GRID = np.concatenate([np.linspace(-10.0, -1e-3, 80), np.linspace(1e-3, 10.0, 80)])


def _central_difference(fn, e: np.ndarray) -> np.ndarray:
    h = 1e-5 * np.maximum(1.0, np.abs(e))
    return (fn(e + h) - fn(e - h)) / (2 * h)


def test_student_log_values():
    assert loss_value(RobustLoss("student_log", 1.0), 1.0) == pytest.approx(0.5 * np.log(2.0), abs=1e-12)
    assert loss_value(RobustLoss("student_log", 1e8, 2.0), 1.0) == pytest.approx(0.25, rel=1e-6)
    e = np.linspace(-5, 5, 11)
    np.testing.assert_allclose(loss_value(RobustLoss("student_log", 1.0, 1.0), e), 0.5 * np.log1p(e ** 2))


@pytest.mark.parametrize("kind", list(LossKind))
def test_origin(kind):
    loss = RobustLoss(kind, 0.5, 2.0)
    assert loss_value(loss, 0.0) == 0.0
    assert weight(loss, 0.0) == pytest.approx(0.5)
    assert influence(loss, 0.0) == 0.0


@pytest.mark.parametrize("kind", list(LossKind))
def test_symmetry_and_monotonicity(kind):
    loss = RobustLoss(kind, 1.0, 1.0)
    e = np.linspace(0.0, 10.0, 101)
    J = loss_value(loss, e)
    assert np.all(np.diff(J) >= 0)
    np.testing.assert_array_equal(J, loss_value(loss, -e))
    np.testing.assert_array_equal(iota(loss, e), iota(loss, -e))


def test_weights():
    assert weight(RobustLoss("student_log", 4.0), 2.0) == pytest.approx(0.5)
    assert weight(RobustLoss("exponential_welsch", 1.0), 2.0) == pytest.approx(np.exp(-2.0))
    assert iota(RobustLoss("student_log", 1.0), 0.0) == pytest.approx(-2.0)
    assert iota(RobustLoss("square_root", 1.0), 0.0) == pytest.approx(-1.0)


@pytest.mark.parametrize("kind,nus", GRID)
@pytest.mark.parametrize("tau2", [0.5, 1.0, 2.0])
def test_gradient_consistency(kind, nus, tau2):
    for nu in nus:
        loss = RobustLoss(kind, nu, tau2)
        np.testing.assert_allclose(influence(loss, E_GRID), _central_difference(lambda e: loss_value(loss, e), E_GRID),
                                   rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(iota(loss, E_GRID) * E_GRID,
                                   _central_difference(lambda e: weight(loss, e), E_GRID), rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("kind", list(LossKind))
def test_weight_bounds(kind):
    nus = np.array([0.1, 0.5, 1.0, 1.5, 1.9]) if kind == LossKind.power_family else np.array([0.1, 1.0, 10.0, 1e3])
    e = np.linspace(-20, 20, 81)
    for tau2 in (0.5, 2.0):
        d = np.array([weight(RobustLoss(kind, nu, tau2), e) for nu in nus])
        assert np.all(d >= 0)
        assert np.all(d <= 1.0 / tau2 + 1e-15)
        # Non-decreasing in ν at fixed e.
        assert np.all(np.diff(d, axis=0) >= -1e-15)


@pytest.mark.parametrize("kind", [LossKind.student_log, LossKind.exponential_welsch, LossKind.square_root])
def test_weight_vanishes_as_nu_shrinks(kind):
    assert weight(RobustLoss(kind, 1e-6), 1.0) < 1e-2
    assert weight(RobustLoss("student_log", 1e-6), 1.0) < 1e-5


def test_gaussian_branch():
    loss = gaussian_loss(2.0)
    assert loss.is_gaussian
    e = np.linspace(-5, 5, 21)
    np.testing.assert_array_equal(weight(loss, e), np.full(e.shape, 0.5))
    np.testing.assert_array_equal(iota(loss, e), np.zeros(e.shape))
    np.testing.assert_allclose(influence(RobustLoss("student_log", 1e8), 3.0), 3.0, rtol=1e-6)
    for kind in (LossKind.exponential_welsch, LossKind.square_root):
        assert weight(RobustLoss(kind, 1e9), 50.0) == 1.0


def test_student_log_near_gaussian_limit():
    e = np.linspace(-5, 5, 41)
    np.testing.assert_allclose(loss_value(RobustLoss("student_log", 5e7, 1.5), e), e ** 2 / 3.0, rtol=1e-6)


def test_power_family_limits():
    e = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(loss_value(RobustLoss("power_family", 2.0 - 1e-9), e), 0.5 * e ** 2, rtol=1e-6)
    with pytest.warns(RuntimeWarning):
        loss = RobustLoss("power_family", 2.0)
    assert loss.is_gaussian
    with pytest.raises(LossError):
        RobustLoss("power_family", 2.5)


def test_invalid_parameters():
    with pytest.raises(LossError):
        RobustLoss("student_log", 0.0)
    with pytest.raises(LossError):
        RobustLoss("student_log", 1.0, -1.0)
    with pytest.raises(LossError):
        RobustLoss("huber", 1.0)


def test_kind_parsing():
    assert LossKind.parse("StudentLog") == LossKind.student_log
    assert LossKind.parse("square_root") == LossKind.square_root
    assert LossKind.parse(LossKind.power_family) == LossKind.power_family
    assert RobustLoss.from_dict({"kind": "ExponentialWelsch", "nu": 2}).kind == LossKind.exponential_welsch


def test_redescending_influence():
    assert abs(influence(RobustLoss("student_log", 1.0), 100.0)) < 0.011


def test_convexity_boundary():
    assert convexity_boundary(RobustLoss("student_log", 4.0)) == 2.0
    assert convexity_boundary(RobustLoss("student_log", 1.0)) == 1.0
    with pytest.raises(LossError):
        convexity_boundary(RobustLoss("square_root", 1.0))

    loss = RobustLoss("student_log", 4.0, 1.0)
    boundary = convexity_boundary(loss)
    h = 1e-3

    def second_difference(e):
        return loss_value(loss, e + h) - 2 * loss_value(loss, e) + loss_value(loss, e - h)

    inside = np.linspace(-boundary + 2 * h, boundary - 2 * h, 51)
    assert np.all(second_difference(inside) >= -1e-9)
    outside = np.concatenate([np.linspace(boundary + 0.05, 10.0, 20), -np.linspace(boundary + 0.05, 10.0, 20)])
    assert np.all(second_difference(outside) < 0)
    assert second_difference(1.5 * boundary) < 0


def test_channel_losses_mixed_kinds():
    losses = ChannelLosses([RobustLoss("student_log", 4.0), RobustLoss("square_root", 1.0, 2.0),
                            RobustLoss("exponential_welsch", 1.0)], n_process=1)
    e = np.array([2.0, 1.0, 2.0])
    np.testing.assert_allclose(losses.weights(e), [0.5, weight(losses[1], 1.0), np.exp(-2.0)])
    np.testing.assert_allclose(losses.values(e), [loss_value(l, x) for l, x in zip(losses.losses, e)])
    losses.check_dimensions(1, 2)
    with pytest.raises(LossError):
        losses.check_dimensions(2, 2)
    uniform = ChannelLosses.uniform("student_log", 1e8, 4.0, n=2, m=1)
    assert [l.nu for l in uniform.losses] == [1e8, 1e8, 4.0]


def test_scaled_loss_argmin_invariance():
    # With an identity regressor each channel is minimized on its own, so positive per-term scales
    # such as (ν + c)/ν cannot move the solution.
    t = np.array([0.3, -2.0, 7.5])
    W = np.eye(3)
    losses = ChannelLosses([RobustLoss("student_log", nu) for nu in (1.0, 4.0, 10.0)])
    base = fixed_point_solve(W, t, losses, np.zeros(3)).x
    for c in (1.0, 3.0):
        scales = (losses.nu + c) / losses.nu
        scaled = fixed_point_solve(W, t, losses, np.zeros(3), scales=scales).x
        np.testing.assert_allclose(scaled, base, atol=1e-10)
    np.testing.assert_allclose(base, t, atol=1e-10)


def test_families_registered():
    assert set(LOSS_FAMILIES) == set(LossKind)
