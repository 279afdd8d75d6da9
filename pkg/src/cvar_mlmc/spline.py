"""Uniform cubic-spline interpolation with derivatives and global argmin.

Splines use not-a-knot end conditions, so any cubic polynomial sampled at the
knots is reproduced exactly (to round-off), which the tests exploit.
No extrapolation: evaluation outside the grid is an error.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .rng import ParameterError


class DomainError(ValueError):
    """Evaluation point outside the spline's interval."""


@dataclass(frozen=True)
class ThetaGrid:
    theta_lo: float
    theta_hi: float
    n: int

    def __post_init__(self):
        if not self.theta_lo < self.theta_hi:
            raise ParameterError("theta_lo must be < theta_hi")
        if self.n < 4:
            raise ParameterError("grid needs at least 4 points")

    @property
    def spacing(self) -> float:
        return (self.theta_hi - self.theta_lo) / (self.n - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.theta_lo, self.theta_hi, self.n)

    def dense_points(self, n_dense: int) -> np.ndarray:
        return np.linspace(self.theta_lo, self.theta_hi, n_dense)


class SplineFunction:
    """Piecewise cubic interpolant of values on a uniform theta grid."""

    def __init__(self, grid: ThetaGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.shape != (grid.n,):
            raise ParameterError(f"expected {grid.n} values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ParameterError("non-finite knot values")
        self.grid = grid
        self.values = values
        self._spl = CubicSpline(grid.points, values, bc_type="not-a-knot")

    def __call__(self, theta, order: int = 0):
        theta = np.asarray(theta, dtype=float)
        eps = 1e-12 * max(1.0, abs(self.grid.theta_lo), abs(self.grid.theta_hi))
        if np.any(theta < self.grid.theta_lo - eps) or np.any(theta > self.grid.theta_hi + eps):
            raise DomainError("evaluation outside the spline interval")
        if not 0 <= order <= 3:
            raise ParameterError("derivative order must be in 0..3")
        return self._spl(np.clip(theta, self.grid.theta_lo, self.grid.theta_hi), nu=order)

    def argmin_on_interval(self) -> tuple[float, float]:
        """Global minimiser over the grid interval.

        Candidates are the endpoints plus all real roots of the piecewise
        quadratic first derivative; ties break towards the smallest theta.
        """
        crit = self._spl.derivative().roots(extrapolate=False)
        crit = np.real(crit[np.isreal(crit)])
        lo, hi = self.grid.theta_lo, self.grid.theta_hi
        cand = np.concatenate(([lo, hi], crit[(crit >= lo) & (crit <= hi)]))
        cand = np.sort(cand)
        vals = self._spl(cand)
        best = np.argmin(vals)
        return float(cand[best]), float(vals[best])


def fit(grid: ThetaGrid, values) -> SplineFunction:
    return SplineFunction(grid, values)
