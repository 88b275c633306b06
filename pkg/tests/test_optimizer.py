import numpy as np
import pytest

from zplsource.exceptions import DomainError
from zplsource.optimizer import damped_least_squares, projected_gradient_norm

X = np.linspace(0.0, 10.0, 30)


def _decay(p):
    return p[0] * np.exp(-X / p[1])


def _decay_jacobian(p):
    e = np.exp(-X / p[1])
    return np.column_stack([e, p[0] * X / p[1] ** 2 * e])


def test_linear_fit_is_exact():
    x = np.arange(5.0)
    y = 2.0 * x + 1.0
    result = damped_least_squares(
        lambda p: p[0] * x + p[1] - y,
        lambda p: np.column_stack([x, np.ones_like(x)]),
        x0=[0.0, 0.0],
        lower=[-np.inf, -np.inf],
        upper=[np.inf, np.inf],
        strict_lower=[False, False],
    )
    assert result.converged
    np.testing.assert_allclose(result.x, [2.0, 1.0], atol=1e-8)


def test_exponential_fit_and_monotone_cost():
    y = _decay([3.0, 2.0])
    result = damped_least_squares(
        lambda p: _decay(p) - y,
        _decay_jacobian,
        x0=[1.0, 1.0],
        lower=[-np.inf, 0.0],
        upper=[np.inf, np.inf],
        strict_lower=[False, True],
    )
    assert result.converged
    np.testing.assert_allclose(result.x, [3.0, 2.0], rtol=1e-6)
    assert np.all(np.diff(result.costs) <= 0)
    assert len(result.trajectory) == result.n_iterations + 1
    assert result.covariance.shape == (2, 2)


def test_closed_bound_is_held():
    x = np.arange(1.0, 6.0)
    result = damped_least_squares(
        lambda p: p[0] * x + x,
        lambda p: x[:, None],
        x0=[1.0],
        lower=[0.0],
        upper=[np.inf],
        strict_lower=[False],
    )
    assert result.converged
    assert result.x[0] == 0.0


def test_strict_lower_bound_rejects_start():
    with pytest.raises(DomainError):
        damped_least_squares(
            lambda p: p,
            lambda p: np.eye(1),
            x0=[0.0],
            lower=[0.0],
            upper=[np.inf],
            strict_lower=[True],
        )


def test_iteration_limit_reports_not_converged():
    y = _decay([3.0, 2.0])
    result = damped_least_squares(
        lambda p: _decay(p) - y,
        _decay_jacobian,
        x0=[1.0, 0.3],
        lower=[-np.inf, 0.0],
        upper=[np.inf, np.inf],
        strict_lower=[False, True],
        max_iterations=1,
    )
    assert not result.converged
    assert result.n_iterations == 1


def test_projected_gradient_excludes_pinned_columns():
    jac = np.array([[1.0], [1.0]])
    resid = np.array([1.0, 1.0])
    assert projected_gradient_norm(
        jac, resid, np.array([0.0]), np.array([0.0]), np.array([np.inf])
    ) == 0.0
    assert projected_gradient_norm(
        jac, resid, np.array([1.0]), np.array([0.0]), np.array([np.inf])
    ) == pytest.approx(1.0)


def _offset_decay(p):
    return p[0] + p[1] * np.exp(-X / p[2])


def _offset_decay_jacobian(p):
    e = np.exp(-X / p[2])
    return np.column_stack([np.ones_like(X), e, p[1] * X / p[2] ** 2 * e])


def test_parameter_on_active_bound_stays_fixed():
    # The best unconstrained offset is negative, so the bound at 0 is active
    y = _decay([3.0, 2.0]) - 0.5 + 0.05 * np.sin(3.0 * X)
    bounded = damped_least_squares(
        lambda p: _offset_decay(p) - y,
        _offset_decay_jacobian,
        x0=[0.2, 1.0, 1.0],
        lower=[0.0, -np.inf, 0.0],
        upper=[np.inf, np.inf, np.inf],
        strict_lower=[False, False, True],
    )
    without_offset = damped_least_squares(
        lambda p: _decay(p) - y,
        _decay_jacobian,
        x0=[1.0, 1.0],
        lower=[-np.inf, 0.0],
        upper=[np.inf, np.inf],
        strict_lower=[False, True],
    )

    assert bounded.converged
    assert bounded.x[0] == 0.0
    assert bounded.gradient_norm <= 1e-6
    np.testing.assert_allclose(bounded.x[1:], without_offset.x, rtol=1e-6)


def test_every_accepted_point_passes_domain_check():
    y = _decay([3.0, 2.0])
    result = damped_least_squares(
        lambda p: _decay(p) - y,
        _decay_jacobian,
        x0=[1.0, 1.0],
        lower=[-np.inf, 0.0],
        upper=[np.inf, np.inf],
        strict_lower=[False, True],
        in_domain=lambda p: p[0] < 3.5,
    )
    assert result.converged
    assert all(p[0] < 3.5 for p in result.trajectory)
    np.testing.assert_allclose(result.x, [3.0, 2.0], rtol=1e-6)


def test_start_outside_domain_check_is_rejected():
    with pytest.raises(DomainError):
        damped_least_squares(
            lambda p: p,
            lambda p: np.eye(1),
            x0=[2.0],
            lower=[-np.inf],
            upper=[np.inf],
            strict_lower=[False],
            in_domain=lambda p: p[0] < 1.0,
        )


def test_small_relative_step_counts_as_converged():
    y = _decay([3.0, 2.0])
    result = damped_least_squares(
        lambda p: _decay(p) - y,
        _decay_jacobian,
        x0=[1.0, 1.0],
        lower=[-np.inf, 0.0],
        upper=[np.inf, np.inf],
        strict_lower=[False, True],
        xtol=0.1,
        gtol=0.0,
    )
    assert result.converged
    assert result.message == "relative step below tolerance"
