"""Damped least squares (Levenberg-Marquardt) with box constraints.

Closed bounds are enforced by projecting each trial point onto the box, and
a parameter resting on a bound that the gradient pushes against is held
fixed for the step. Strict (open) lower bounds and the optional domain
check reject the trial point and raise the damping.
Only steps that lower the weighted residual norm are accepted, so the cost
history is monotone.
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from .exceptions import DomainError
from .logger import logger

MAX_ITERATIONS = 200
XTOL = 1e-9
GTOL = 1e-9
# Weighted residual norm (per point, in sigma units) treated as an exact fit
RTOL = 1e-10
# Projected gradient accepted when no lower-cost step can be represented:
# rounding in the residuals keeps the cosine from reaching GTOL there
STALL_GTOL = 1e-6
LAMBDA_INIT = 1e-3
LAMBDA_MAX = 1e16


@dataclass
class OptimizerResult:
    x: np.ndarray
    covariance: np.ndarray
    cost: float
    n_iterations: int
    converged: bool
    gradient_norm: float
    message: str
    trajectory: list = field(default_factory=list)
    costs: list = field(default_factory=list)


def _active_bounds(
    x: np.ndarray, grad: np.ndarray, lower: np.ndarray, upper: np.ndarray
) -> np.ndarray:
    """Parameters sitting on a closed bound that descent would push past."""
    return ((x <= lower) & (grad > 0)) | ((x >= upper) & (grad < 0))


def projected_gradient_norm(
    jac: np.ndarray,
    resid: np.ndarray,
    x: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
) -> float:
    """Largest cosine between the residual and a free Jacobian column.

    Columns of parameters held at a bound by the gradient are excluded.
    """
    rnorm = np.linalg.norm(resid)
    if rnorm == 0:
        return 0.0
    grad = jac.T @ resid
    col_norms = np.linalg.norm(jac, axis=0)
    usable = (col_norms > 0) & ~_active_bounds(x, grad, lower, upper)
    if not usable.any():
        return 0.0
    return float(np.max(np.abs(grad[usable]) / (col_norms[usable] * rnorm)))


def _damped_step(
    jtj: np.ndarray, grad: np.ndarray, damping: np.ndarray, lam: float
) -> np.ndarray:
    try:
        return linalg.solve(jtj + lam * np.diag(damping), -grad, assume_a="pos")
    except (linalg.LinAlgError, ValueError):
        return linalg.lstsq(jtj + lam * np.diag(damping), -grad)[0]


def damped_least_squares(
    residuals: Callable[[np.ndarray], np.ndarray],
    jacobian: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    lower: np.ndarray,
    upper: np.ndarray,
    strict_lower: np.ndarray,
    max_iterations: int = MAX_ITERATIONS,
    xtol: float = XTOL,
    gtol: float = GTOL,
    in_domain: Optional[Callable[[np.ndarray], bool]] = None,
) -> OptimizerResult:
    """Minimize 0.5*||residuals(x)||^2 inside the box [lower, upper].

    Args:
        residuals: Weighted residual vector (model - data) / sigma
        jacobian: Derivative of ``residuals`` with respect to ``x``
        x0: Starting point; must be feasible
        lower, upper: Bounds per parameter (+-inf for none)
        strict_lower: Parameters whose lower bound is excluded (x > lower)
        in_domain: Extra check every trial point must pass

    Returns:
        OptimizerResult with the last accepted point. ``converged`` is False
        when the iteration limit is reached or no descent step exists.
    """
    x = np.array(x0, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    strict_lower = np.asarray(strict_lower, dtype=bool)
    closed = ~strict_lower
    x[closed] = np.clip(x[closed], lower[closed], upper[closed])

    def feasible(point: np.ndarray) -> bool:
        inside = bool(
            np.all(point[strict_lower] > lower[strict_lower])
            and np.all(point >= lower)
            and np.all(point <= upper)
        )
        return inside and (in_domain is None or bool(in_domain(point)))

    if not feasible(x):
        raise DomainError(f"Starting point {x0} lies outside the parameter domain")

    resid = residuals(x)
    cost = 0.5 * float(resid @ resid)
    m = resid.shape[0]
    lam = LAMBDA_INIT
    trajectory, costs = [x.copy()], [cost]
    converged, message = False, "iteration limit reached"
    gnorm = np.inf
    jac = jacobian(x)

    for iteration in range(1, max_iterations + 1):
        gnorm = projected_gradient_norm(jac, resid, x, lower, upper)
        if np.linalg.norm(resid) <= RTOL * np.sqrt(m):
            converged, message, gnorm = True, "exact fit", 0.0
            break
        if gnorm <= gtol:
            converged, message = True, "gradient below tolerance"
            break

        grad = jac.T @ resid
        free = np.flatnonzero(~_active_bounds(x, grad, lower, upper))
        jtj = (jac.T @ jac)[np.ix_(free, free)]
        diag = np.diag(jtj).copy()
        floor = 1e-12 * diag.max() if diag.max() > 0 else 1.0
        damping = np.maximum(diag, floor)

        accepted = False
        while lam <= LAMBDA_MAX:
            trial = x.copy()
            trial[free] += _damped_step(jtj, grad[free], damping, lam)
            trial[closed] = np.clip(trial[closed], lower[closed], upper[closed])
            if not np.all(np.isfinite(trial)) or not feasible(trial):
                lam *= 10.0
                continue
            trial_resid = residuals(trial)
            # Reduction from the residual difference, so that decreases far
            # below the rounding level of the cost itself remain visible
            reduction = 0.5 * float((resid - trial_resid) @ (resid + trial_resid))
            if np.isfinite(reduction) and reduction > 0:
                accepted = True
                break
            lam *= 10.0

        if not accepted:
            if gnorm <= STALL_GTOL:
                converged, message = True, "no further decrease representable"
            else:
                message = "damping limit reached without descent"
            break

        rel_step = np.linalg.norm(trial - x) / (np.linalg.norm(x) + xtol)
        x, resid = trial, trial_resid
        cost = 0.5 * float(resid @ resid)
        jac = jacobian(x)
        trajectory.append(x.copy())
        costs.append(cost)
        lam = max(lam / 10.0, 1e-12)
        logger.debug(
            f"LM iteration {iteration}: cost {cost:.6g}, step {rel_step:.3g}, "
            f"lambda {lam:.3g}"
        )
        if rel_step <= xtol:
            gnorm = projected_gradient_norm(jac, resid, x, lower, upper)
            converged, message = True, "relative step below tolerance"
            break

    covariance = linalg.pinvh(jac.T @ jac)
    return OptimizerResult(
        x=x,
        covariance=covariance,
        cost=cost,
        n_iterations=len(trajectory) - 1,
        converged=converged,
        gradient_norm=float(gnorm),
        message=message,
        trajectory=trajectory,
        costs=costs,
    )
