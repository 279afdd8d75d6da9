"""Continuation MLMC: adapt (n, L, {N_l}) over a decreasing tolerance sequence.

Starting from a screening hierarchy (or a warm start from a previous design),
the controller walks a geometric tolerance schedule down to the target.  At
each round the squared tolerance is split into interpolation, bias and
statistical budgets; the grid size follows the cubic spacing law, levels are
added while the extrapolated bias exceeds its budget, and the level-wise
sample sizes follow the classical work-balanced allocation driven by the
bootstrap variance proxies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (DEFAULT_BOOTSTRAP_REPLICAS, BootstrapResult, ErrorBreakdown,
                     estimate_errors)
from .estimator import Hierarchy, ParametricEstimates, estimate
from .models.base import Model
from .rng import ParameterError
from .spline import ThetaGrid


class ConvergenceFailure(RuntimeError):
    def __init__(self, msg: str, breakdown: ErrorBreakdown):
        super().__init__(msg)
        self.breakdown = breakdown


@dataclass(frozen=True)
class RateEstimates:
    alpha_hat: float   # weak rate (level-difference mean decay)
    beta_hat: float    # variance decay rate
    gamma_hat: float   # cost growth rate


@dataclass(frozen=True)
class ToleranceSplit:
    interp: float = 0.1
    bias: float = 0.3
    stat: float = 0.6


@dataclass(frozen=True)
class ControllerConfig:
    split: ToleranceSplit = field(default_factory=ToleranceSplit)
    schedule_ratio: float = 2.0
    safety: float = 1.1
    max_rounds: int = 12
    n_max: int = 1025
    bootstrap_replicas: int = DEFAULT_BOOTSTRAP_REPLICAS


@dataclass
class RoundRecord:
    round_index: int
    tolerance: float
    hierarchy: Hierarchy
    breakdown: ErrorBreakdown
    cost: float

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "tolerance": self.tolerance,
            "L": self.hierarchy.L,
            "N_l": list(self.hierarchy.N_l),
            "n": self.hierarchy.n,
            "errors": self.breakdown.to_dict(),
            "cost": self.cost,
        }


@dataclass
class CmlmcResult:
    estimates: ParametricEstimates
    breakdown: ErrorBreakdown
    hierarchy: Hierarchy
    rates: RateEstimates
    rounds: list[RoundRecord]
    total_cost: float


def fit_rates(batches, s: float, bias_rate: float) -> RateEstimates:
    """Variance and cost rates from the coupled batches; weak rate from bias fit."""
    variances, costs, levels = [], [], []
    for batch in batches:
        costs.append(batch.costs.mean())
        if batch.level >= 1:
            variances.append(max(np.var(batch.q_fine - batch.q_coarse, ddof=1), 1e-300))
            levels.append(batch.level)
    beta = float("nan")
    if len(variances) >= 2:
        slope = np.polyfit(levels, np.log(variances), 1)[0]
        beta = -slope / math.log(s)
    gamma = 1.0
    if len(costs) >= 2:
        slope = np.polyfit(np.arange(len(costs)), np.log(costs), 1)[0]
        gamma = slope / math.log(s)
    alpha = bias_rate if np.isfinite(bias_rate) and bias_rate > 0 else 1.0
    return RateEstimates(alpha, beta, float(gamma))


def allocate_samples(v_l: np.ndarray, c_l: np.ndarray, eps_s: float,
                     safety: float = 1.1) -> tuple[int, ...]:
    """Work-balanced sample sizes for a statistical error budget eps_s."""
    v_l = np.asarray(v_l, dtype=float)
    c_l = np.asarray(c_l, dtype=float)
    if np.any(v_l < 0) or np.any(c_l <= 0) or eps_s <= 0:
        raise ParameterError("require V_l >= 0, C_l > 0 and eps_s > 0")
    total = float(np.sqrt(v_l * c_l).sum())
    if total == 0.0:
        return tuple([2] * v_l.size)
    raw = safety * eps_s ** -2 * np.sqrt(v_l / c_l) * total
    return tuple(int(max(2, math.ceil(r))) for r in raw)


def select_grid_size(n: int, e_i: float, eps_i: float, n_max: int = 1025) -> tuple[int, bool]:
    """Smallest admissible grid (n - 1 a power-of-two multiple of 8) meeting eps_i.

    Predicted error scales as the cube of the spacing; the grid never shrinks.
    Returns (n_new, capped_flag).
    """
    if e_i <= eps_i or e_i == 0.0:
        return n, False
    n_new = n
    while n_new < n_max and e_i * ((n - 1) / (n_new - 1)) ** 3 > eps_i:
        n_new = 2 * (n_new - 1) + 1
    if n_new > n_max:
        return n_max, True
    return n_new, e_i * ((n - 1) / (n_new - 1)) ** 3 > eps_i


def default_screen_hierarchy(n: int = 17) -> Hierarchy:
    return Hierarchy(2, (64, 32, 16), n)


def screening(model: Model, z: np.ndarray, hierarchy: Hierarchy, grid: ThetaGrid,
              tau: float, seed: int, replica_tag: int = 0,
              config: ControllerConfig = ControllerConfig(),
              ) -> tuple[ParametricEstimates, ErrorBreakdown, RateEstimates, BootstrapResult]:
    """Simulate a small hierarchy and fit errors and rates from its batches."""
    if hierarchy.L < 1 or any(nl < 8 for nl in hierarchy.N_l):
        raise ParameterError("screening hierarchy needs L >= 1 and N_l >= 8")
    estimates = estimate(model, z, hierarchy, grid, tau, seed, replica_tag)
    breakdown, boot = estimate_errors(estimates.batches, grid, tau, hierarchy.s,
                                      config.bootstrap_replicas, seed)
    rates = fit_rates(estimates.batches, hierarchy.s, breakdown.bias_rate)
    return estimates, breakdown, rates, boot


def _grow_grid(grid: ThetaGrid, n: int) -> ThetaGrid:
    return ThetaGrid(grid.theta_lo, grid.theta_hi, n)


def run_cmlmc(model: Model, z: np.ndarray, tau: float, target_tol: float,
              grid: ThetaGrid, seed: int, replica_tag: int = 0,
              warm_start: tuple[Hierarchy, RateEstimates] | None = None,
              config: ControllerConfig = ControllerConfig()) -> CmlmcResult:
    """Adapt the hierarchy until the estimated gradient MSE meets target_tol^2."""
    if target_tol <= 0:
        raise ParameterError("target tolerance must be positive")
    if warm_start is not None:
        hierarchy, rates = warm_start
        hierarchy = replace(hierarchy, n=max(hierarchy.n, grid.n))
    else:
        hierarchy = default_screen_hierarchy(grid.n)
        rates = None

    split = config.split
    total_cost = 0.0
    rounds: list[RoundRecord] = []

    estimates = estimate(model, z, hierarchy, _grow_grid(grid, hierarchy.n),
                         tau, seed, replica_tag)
    breakdown, boot = estimate_errors(estimates.batches, estimates.grid, tau,
                                      hierarchy.s, config.bootstrap_replicas, seed)
    if rates is None:
        rates = fit_rates(estimates.batches, hierarchy.s, breakdown.bias_rate)
    total_cost += estimates.total_cost

    err0 = math.sqrt(breakdown.total_mse_sq)
    r = config.schedule_ratio
    n_steps = max(0, math.ceil(math.log(max(err0 / target_tol, 1.0), r)))

    for round_index in range(config.max_rounds):
        rounds.append(RoundRecord(round_index, target_tol, hierarchy, breakdown,
                                  estimates.total_cost))
        if breakdown.total_mse_sq <= target_tol ** 2:
            return CmlmcResult(estimates, breakdown, hierarchy, rates, rounds, total_cost)

        tol_k = target_tol * r ** max(0, n_steps - 1 - round_index)
        budget_i = split.interp * tol_k ** 2
        budget_b = split.bias * tol_k ** 2
        budget_s = split.stat * tol_k ** 2

        # Grid size from the cubic spacing law.
        n_new, _capped = select_grid_size(hierarchy.n, math.sqrt(breakdown.interp_sq),
                                          math.sqrt(budget_i), config.n_max)

        # Levels: extrapolate the remaining bias down by s^-alpha per added level.
        alpha = rates.alpha_hat if rates.alpha_hat > 0 else 1.0
        shrink = hierarchy.s ** -alpha
        predicted_b = breakdown.bias_sq
        new_levels = 0
        while predicted_b > budget_b and hierarchy.L + new_levels < model.max_level:
            new_levels += 1
            predicted_b *= shrink ** 2

        # Sample sizes from bootstrap variance proxies, extrapolated to new levels.
        v_l = list(boot.level_var_proxy)
        c_l = [batch.costs.mean() for batch in estimates.batches]
        beta = rates.beta_hat if np.isfinite(rates.beta_hat) else 2 * alpha
        for _ in range(new_levels):
            v_l.append(v_l[-1] * hierarchy.s ** -beta)
            c_l.append(c_l[-1] * hierarchy.s ** rates.gamma_hat)
        n_l = allocate_samples(np.asarray(v_l), np.asarray(c_l),
                               math.sqrt(budget_s), config.safety)
        # Warm start never discards levels or shrinks existing allocations below 2.
        n_l = tuple(max(nl, 2) for nl in n_l)

        hierarchy = Hierarchy(len(n_l) - 1, n_l, n_new, hierarchy.s)
        estimates = estimate(model, z, hierarchy, _grow_grid(grid, n_new),
                             tau, seed, replica_tag)
        breakdown, boot = estimate_errors(estimates.batches, estimates.grid, tau,
                                          hierarchy.s, config.bootstrap_replicas, seed)
        rates = fit_rates(estimates.batches, hierarchy.s, breakdown.bias_rate)
        total_cost += estimates.total_cost

    rounds.append(RoundRecord(config.max_rounds, target_tol, hierarchy, breakdown,
                              estimates.total_cost))
    if breakdown.total_mse_sq <= target_tol ** 2:
        return CmlmcResult(estimates, breakdown, hierarchy, rates, rounds, total_cost)
    raise ConvergenceFailure(
        f"tolerance {target_tol} not reached in {config.max_rounds} rounds "
        f"(mse={breakdown.total_mse_sq:.3e})", breakdown)
