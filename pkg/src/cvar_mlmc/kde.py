"""Gaussian-kernel smoothed tail expectations, used inside error estimation.

The building block is the partial moment of a Gaussian kernel,
M(theta; mu, delta) = integral of (q - theta)^+ against a N(mu, delta^2)
density, which has the closed form
    M = (mu - theta) * N_cdf((mu - theta)/delta) + delta * n_pdf((mu - theta)/delta).
Smoothed versions of the tail integrands and their level differences follow by
summing M over the samples; the sensitivity kernel integrates out to the
sample value itself.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import ndtr

from .rng import ParameterError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

BANDWIDTH_FLOOR = 1e-12


class InsufficientSamplesError(ValueError):
    pass


def _norm_cdf_arr(x: np.ndarray) -> np.ndarray:
    return ndtr(x)


def _norm_pdf_arr(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def gaussian_partial_moment(theta, mu, delta):
    """Closed form of the integral of (q - theta)^+ against K_delta(q, mu)."""
    theta = np.asarray(theta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(np.asarray(delta) <= 0):
        raise ParameterError("bandwidth must be positive")
    t = (mu - theta) / delta
    return (mu - theta) * _norm_cdf_arr(t) + delta * _norm_pdf_arr(t)


def scott_bandwidth(samples: np.ndarray) -> float:
    """Scott's rule per marginal: sample std times N^(-1/5), floored."""
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    if n < 2:
        raise InsufficientSamplesError("bandwidth selection needs at least 2 samples")
    sigma = float(np.std(samples, ddof=1))
    return max(sigma * n ** (-0.2), BANDWIDTH_FLOOR)


def kde_phi(theta_points: np.ndarray, q_samples: np.ndarray, delta: float, tau: float) -> np.ndarray:
    """Smoothed tail functional theta + E[(Q - theta)^+]/(1 - tau) on a grid."""
    q = np.asarray(q_samples, dtype=float)
    if q.size < 2:
        raise InsufficientSamplesError("kde_phi needs at least 2 samples")
    theta = np.asarray(theta_points, dtype=float)
    m = gaussian_partial_moment(theta[:, None], q[None, :], delta)
    return theta + m.mean(axis=1) / (1.0 - tau)


def kde_psi(theta_points: np.ndarray, q_samples: np.ndarray, qz_samples: np.ndarray,
            delta: float, tau: float) -> np.ndarray:
    """Smoothed -E[(Q - theta)^+ Q_z]/(1 - tau) for one sensitivity component."""
    q = np.asarray(q_samples, dtype=float)
    qz = np.asarray(qz_samples, dtype=float)
    if q.size < 2:
        raise InsufficientSamplesError("kde_psi needs at least 2 samples")
    theta = np.asarray(theta_points, dtype=float)
    m = gaussian_partial_moment(theta[:, None], q[None, :], delta)
    return -(m * qz[None, :]).mean(axis=1) / (1.0 - tau)


def kde_phi_level_difference(theta_points: np.ndarray,
                             q_fine: np.ndarray, q_coarse: np.ndarray,
                             delta_fine: float, delta_coarse: float,
                             tau: float) -> np.ndarray:
    """Smoothed level difference of the tail functional on paired samples."""
    qf = np.asarray(q_fine, dtype=float)
    qc = np.asarray(q_coarse, dtype=float)
    if qf.size < 2:
        raise InsufficientSamplesError("level difference needs at least 2 samples")
    theta = np.asarray(theta_points, dtype=float)
    mf = gaussian_partial_moment(theta[:, None], qf[None, :], delta_fine)
    mc = gaussian_partial_moment(theta[:, None], qc[None, :], delta_coarse)
    return (mf - mc).mean(axis=1) / (1.0 - tau)


def kde_level_difference(theta_points: np.ndarray,
                         q_fine: np.ndarray, qz_fine: np.ndarray,
                         q_coarse: np.ndarray, qz_coarse: np.ndarray,
                         delta_fine: float, delta_coarse: float,
                         tau: float) -> np.ndarray:
    """Smoothed level difference of the sensitivity integrand on paired samples."""
    qf = np.asarray(q_fine, dtype=float)
    qc = np.asarray(q_coarse, dtype=float)
    gf = np.asarray(qz_fine, dtype=float)
    gc = np.asarray(qz_coarse, dtype=float)
    if qf.size < 2:
        raise InsufficientSamplesError("level difference needs at least 2 samples")
    theta = np.asarray(theta_points, dtype=float)
    mf = gaussian_partial_moment(theta[:, None], qf[None, :], delta_fine)
    mc = gaussian_partial_moment(theta[:, None], qc[None, :], delta_coarse)
    return (gc[None, :] * mc - gf[None, :] * mf).mean(axis=1) / (1.0 - tau)


def fourth_derivative_sup_norm(values: np.ndarray, spacing: float) -> float:
    """Max absolute central fourth difference over the interior of a dense grid."""
    values = np.asarray(values, dtype=float)
    if values.size < 9:
        raise ParameterError("need at least 9 points for a stable fourth difference")
    d4 = values[:-4] - 4 * values[1:-3] + 6 * values[2:-2] - 4 * values[3:-1] + values[4:]
    return float(np.max(np.abs(d4)) / spacing ** 4)


def dense_grid_size(n: int) -> int:
    """Dense probe-grid size for sup norms and fourth differences."""
    return max(10 * n, 1000)
