"""Multilevel Monte Carlo estimator of the parametric tail expectations.

Pointwise estimates on the theta grid telescoped over levels, spline
functionalisation, and VaR/CVaR extraction.  The integrands are
    phi(theta, Q)        = theta + (Q - theta)^+ / (1 - tau)
    psi(theta, Q, Q_z_k) = -(Q - theta)^+ * Q_z_k / (1 - tau)
evaluated on all grid points per sample in one vectorised pass.  Level batches
are retained in memory so the error estimators can resample them without
re-simulation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models.base import LevelBatch, Model
from .rng import ParameterError
from .spline import SplineFunction, ThetaGrid, fit


class BoundaryMinimiserError(RuntimeError):
    """The tail minimiser landed on the interval boundary; regrow the interval."""


@dataclass(frozen=True)
class Hierarchy:
    L: int
    N_l: tuple[int, ...]
    n: int
    s: int = 2

    def __post_init__(self):
        if self.L < 0 or len(self.N_l) != self.L + 1:
            raise ParameterError("need one sample size per level 0..L")
        if any(nl < 2 for nl in self.N_l):
            raise ParameterError("every level needs at least 2 samples")
        if self.n < 4:
            raise ParameterError("grid size must be >= 4")

    def with_samples(self, n_l: tuple[int, ...]) -> "Hierarchy":
        return Hierarchy(len(n_l) - 1, tuple(n_l), self.n, self.s)


@dataclass
class PhiPsiPointwise:
    phi: np.ndarray          # (n,)
    psi: np.ndarray          # (n, d)


@dataclass
class ParametricEstimates:
    grid: ThetaGrid
    design: np.ndarray
    phi: SplineFunction
    psi: list[SplineFunction]
    batches: list[LevelBatch]
    tau: float
    total_cost: float = field(init=False)

    def __post_init__(self):
        self.total_cost = sum(b.total_cost for b in self.batches)


def phi_terms(theta: np.ndarray, q: np.ndarray, tau: float) -> np.ndarray:
    """phi(theta_r, Q_i) as an (n, N) matrix."""
    return theta[:, None] + np.maximum(q[None, :] - theta[:, None], 0.0) / (1.0 - tau)


def psi_terms(theta: np.ndarray, q: np.ndarray, grads: np.ndarray, tau: float) -> np.ndarray:
    """psi(theta_r, Q_i, Q_z_k_i) as an (n, N, d) array."""
    pos = np.maximum(q[None, :] - theta[:, None], 0.0)
    return -pos[:, :, None] * grads[None, :, :] / (1.0 - tau)


def pointwise_from_batches(batches: list[LevelBatch], grid: ThetaGrid,
                           tau: float) -> PhiPsiPointwise:
    """Telescoped pointwise estimates from retained level batches."""
    theta = grid.points
    d = batches[0].grad_fine.shape[1]
    phi = np.zeros(grid.n)
    psi = np.zeros((grid.n, d))
    for batch in batches:
        fine_phi = phi_terms(theta, batch.q_fine, tau)
        fine_psi = psi_terms(theta, batch.q_fine, batch.grad_fine, tau)
        if batch.level == 0:
            phi += fine_phi.mean(axis=1)
            psi += fine_psi.mean(axis=1)
        else:
            coarse_phi = phi_terms(theta, batch.q_coarse, tau)
            coarse_psi = psi_terms(theta, batch.q_coarse, batch.grad_coarse, tau)
            phi += (fine_phi - coarse_phi).mean(axis=1)
            psi += (fine_psi - coarse_psi).mean(axis=1)
    return PhiPsiPointwise(phi, psi)


def estimate_pointwise(model: Model, z: np.ndarray, hierarchy: Hierarchy,
                       grid: ThetaGrid, tau: float, master_seed: int,
                       replica_tag: int = 0,
                       ) -> tuple[PhiPsiPointwise, list[LevelBatch]]:
    """Simulate the hierarchy and compute pointwise estimates on the grid."""
    batches = [
        model.sample_batch(z, level, master_seed, n_l, replica_tag)
        for level, n_l in enumerate(hierarchy.N_l)
    ]
    return pointwise_from_batches(batches, grid, tau), batches


def build_functionals(pointwise: PhiPsiPointwise, grid: ThetaGrid, z: np.ndarray,
                      batches: list[LevelBatch], tau: float) -> ParametricEstimates:
    phi_spline = fit(grid, pointwise.phi)
    psi_splines = [fit(grid, pointwise.psi[:, k]) for k in range(pointwise.psi.shape[1])]
    return ParametricEstimates(grid, np.asarray(z, dtype=float), phi_spline,
                               psi_splines, batches, tau)


def estimate(model: Model, z: np.ndarray, hierarchy: Hierarchy, grid: ThetaGrid,
             tau: float, master_seed: int, replica_tag: int = 0) -> ParametricEstimates:
    """One-shot MLMC estimate of the parametric expectations for a design."""
    batches = [
        model.sample_batch(z, level, master_seed, n_l, replica_tag)
        for level, n_l in enumerate(hierarchy.N_l)
    ]
    pointwise = pointwise_from_batches(batches, grid, tau)
    return build_functionals(pointwise, grid, z, batches, tau)


def extract_var_cvar(estimates: ParametricEstimates,
                     boundary_tol: float = 1e-9) -> tuple[float, float]:
    """VaR and CVaR as the argmin and minimum of the fitted tail functional."""
    theta_star, value = estimates.phi.argmin_on_interval()
    grid = estimates.grid
    margin = boundary_tol * (grid.theta_hi - grid.theta_lo)
    if theta_star <= grid.theta_lo + margin or theta_star >= grid.theta_hi - margin:
        raise BoundaryMinimiserError(
            f"minimiser {theta_star} on interval boundary [{grid.theta_lo}, {grid.theta_hi}]"
        )
    return theta_star, value
