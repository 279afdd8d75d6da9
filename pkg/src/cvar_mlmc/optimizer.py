"""Alternating minimisation-gradient descent driven by CMLMC accuracy control.

Each iteration minimises the fitted tail functional exactly in theta over an
interval chosen around the running quantile, then takes a gradient step in the
design using the sensitivity functional's derivative at the minimiser plus the
quadratic penalty term.  The theta component of the gradient is identically
zero at an interior minimiser, so the residual tracks only the design part.
Iteration j >= 1 re-estimates the functionals with a squared-MSE target equal
to eta^2 times the previous squared gradient norm, warm-started from the
previous optimal hierarchy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .controller import ControllerConfig, RateEstimates, run_cmlmc
from .estimator import (Hierarchy, ParametricEstimates, build_functionals,
                        pointwise_from_batches)
from .models.base import Model
from .rng import ParameterError
from .spline import ThetaGrid


class ThetaIntervalError(RuntimeError):
    """Minimiser stayed on the interval boundary after regrowing once."""


@dataclass(frozen=True)
class OuuProblem:
    model: Model
    tau: float
    kappa: float
    z_ref: np.ndarray
    z0: np.ndarray
    alpha: float = 0.1
    eta: float = 0.2
    eps: float = 0.01
    seed: int = 0
    max_iters: int = 200
    n_init: int = 17
    screen_hierarchy: Hierarchy | None = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ParameterError("tau must be strictly interior to (0, 1)")
        if self.kappa < 0 or self.alpha <= 0 or self.eta <= 0:
            raise ParameterError("require kappa >= 0, alpha > 0, eta > 0")
        if not 0.0 < self.eps < 1.0:
            raise ParameterError("residual tolerance must be in (0, 1)")


@dataclass
class OptState:
    j: int
    z: np.ndarray
    theta: float
    q_tau: float
    c_tau: float
    objective: float
    residual: float
    gradient: np.ndarray          # design part of the combined gradient
    hierarchy: Hierarchy
    iteration_cost: float
    cumulative_cost: float
    interval: tuple[float, float]


@dataclass
class OptResult:
    history: list[OptState]
    estimates: ParametricEstimates
    converged: bool


def select_theta_interval(q_samples: np.ndarray, tau: float,
                          prev_theta: float | None = None) -> tuple[float, float]:
    """Quantile-bracketing interval for the exact theta minimisation.

    The bracket [q_{tau-0.1}, q_{tau+0.1}] is widened symmetrically by half its
    width; a previous minimiser, when given, is kept at least 10% of the width
    away from either endpoint.  Degenerate sample spreads fall back to a width
    proportional to the sample magnitude.
    """
    q = np.asarray(q_samples, dtype=float)
    if q.size < 8:
        raise ParameterError("interval selection needs at least 8 samples")
    lo = float(np.quantile(q, max(tau - 0.1, 0.0)))
    hi = float(np.quantile(q, min(tau + 0.1, 1.0)))
    width = hi - lo
    scale = max(1.0, abs(float(np.quantile(q, tau))))
    if width < 1e-12 * scale:
        c = float(np.quantile(q, tau))
        half = 0.1 * max(1.0, abs(c))
        return c - half, c + half
    lo -= 0.25 * width
    hi += 0.25 * width
    if prev_theta is not None:
        w = hi - lo
        if prev_theta < lo + 0.1 * w:
            lo = (prev_theta - 0.1 * hi) / 0.9
        w = hi - lo
        if prev_theta > hi - 0.1 * w:
            hi = (prev_theta - 0.1 * lo) / 0.9
    return lo, hi


def _interval_from_batches(batches, tau: float, prev_theta: float | None) -> tuple[float, float]:
    # Pool the two finest levels: coarse-level quantiles carry a
    # discretisation bias that can push the minimiser off the interval.
    pooled = np.concatenate([b.q_fine for b in batches[-2:]])
    return select_theta_interval(pooled, tau, prev_theta)


def _minimise_theta(estimates: ParametricEstimates, prev_theta: float | None,
                    ) -> tuple[float, float, ParametricEstimates]:
    """Exact minimisation over the grid interval, regrowing the interval once
    (from retained batches, no re-simulation) if the minimiser hits a boundary."""
    grid = estimates.grid
    for attempt in range(2):
        theta_star, value = estimates.phi.argmin_on_interval()
        margin = 1e-9 * (grid.theta_hi - grid.theta_lo)
        interior = grid.theta_lo + margin < theta_star < grid.theta_hi - margin
        if interior:
            return theta_star, value, estimates
        width = grid.theta_hi - grid.theta_lo
        lo, hi = grid.theta_lo - width, grid.theta_hi + width
        grid = ThetaGrid(lo, hi, grid.n)
        pw = pointwise_from_batches(estimates.batches, grid, estimates.tau)
        estimates = build_functionals(pw, grid, estimates.design,
                                      estimates.batches, estimates.tau)
    raise ThetaIntervalError("theta minimiser on the boundary after regrowth")


def _design_gradient(problem: OuuProblem, estimates: ParametricEstimates,
                     theta: float, z: np.ndarray) -> np.ndarray:
    psi_prime = np.array([s(theta, order=1) for s in estimates.psi])
    return psi_prime + 2.0 * problem.kappa * (z - problem.z_ref)


def run(problem: OuuProblem, callback=None) -> OptResult:
    """CMLMC-driven descent until the squared gradient ratio drops below eps.

    `callback`, if given, is invoked with each OptState as it is recorded,
    e.g. for progress reporting during long runs.
    """
    model = problem.model
    screen = problem.screen_hierarchy or Hierarchy(2, (64, 32, 16), problem.n_init)
    z = np.asarray(problem.z0, dtype=float).copy()

    history: list[OptState] = []
    cumulative_cost = 0.0
    grad_norm0_sq = None
    prev_theta = None
    prev_grad_norm_sq = None
    warm: tuple[Hierarchy, RateEstimates] | None = None
    estimates = None

    for j in range(problem.max_iters):
        if j == 0:
            # Fixed screening hierarchy for the first gradient estimate.
            batches = [model.sample_batch(z, level, problem.seed, n_l, replica_tag=j)
                       for level, n_l in enumerate(screen.N_l)]
            lo, hi = _interval_from_batches(batches, problem.tau, prev_theta)
            grid = ThetaGrid(lo, hi, screen.n)
            pw = pointwise_from_batches(batches, grid, problem.tau)
            estimates = build_functionals(pw, grid, z, batches, problem.tau)
            hierarchy = screen
            rates = None
            iteration_cost = estimates.total_cost
        else:
            target_tol = problem.eta * math.sqrt(prev_grad_norm_sq)
            # Probe the quantile bracket at the finest level in use so the
            # minimiser stays interior despite coarse-level quantile bias.
            probe_level = warm[0].L if warm else 0
            probe = model.sample_batch(z, probe_level, problem.seed, 64,
                                       replica_tag=j)
            lo, hi = select_theta_interval(probe.q_fine, problem.tau, prev_theta)
            grid = ThetaGrid(lo, hi, warm[0].n if warm else problem.n_init)
            result = run_cmlmc(model, z, problem.tau, target_tol, grid,
                               problem.seed, replica_tag=j, warm_start=warm,
                               config=problem.controller)
            estimates = result.estimates
            hierarchy = result.hierarchy
            rates = result.rates
            iteration_cost = result.total_cost + probe.total_cost

        theta_j, phi_min, estimates = _minimise_theta(estimates, prev_theta)
        grad_z = _design_gradient(problem, estimates, theta_j, z)
        grad_norm_sq = float(grad_z @ grad_z)  # theta component is exactly 0
        if grad_norm0_sq is None:
            grad_norm0_sq = grad_norm_sq
        residual = grad_norm_sq / grad_norm0_sq

        cumulative_cost += iteration_cost
        objective = phi_min + problem.kappa * float(np.sum((z - problem.z_ref) ** 2))
        history.append(OptState(
            j=j, z=z.copy(), theta=theta_j, q_tau=theta_j, c_tau=phi_min,
            objective=objective, residual=residual, gradient=grad_z,
            hierarchy=hierarchy, iteration_cost=iteration_cost,
            cumulative_cost=cumulative_cost,
            interval=(estimates.grid.theta_lo, estimates.grid.theta_hi),
        ))
        if callback is not None:
            callback(history[-1])

        if residual <= problem.eps:
            return OptResult(history, estimates, converged=True)

        z = z - problem.alpha * grad_z
        prev_theta = theta_j
        prev_grad_norm_sq = grad_norm_sq
        if rates is None:
            rates = _fallback_rates(estimates, hierarchy)
        warm = (hierarchy, rates)

    return OptResult(history, estimates, converged=False)


def _fallback_rates(estimates: ParametricEstimates, hierarchy: Hierarchy) -> RateEstimates:
    from .controller import fit_rates
    return fit_rates(estimates.batches, hierarchy.s, float("nan"))
