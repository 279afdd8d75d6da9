"""Forced FitzHugh-Nagumo oscillator with discrete adjoint sensitivities.

The state (v, w) is advanced with Euler-Maruyama; the quantity of interest is
the trapezoid-rule time average of v^2.  Sensitivities with respect to the
design z = [a, b, zeta, I] come from the discrete adjoint of that exact
time-stepping map, solved backwards in time, so they equal the pathwise
derivative of the discrete QoI to round-off.  The tail-indicator factor is
deliberately left out of the adjoint; the estimator applies it through the
integrand, which lets one backward solve serve every theta.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..rng import ParameterError, SeedStream, derive_stream
from .base import CorrelatedSample, LevelBatch, Model, SampleError


@dataclass(frozen=True)
class FhnParams:
    sigma: float = 0.01
    T: float = 10.0
    N_T0: int = 20
    v0: float = 0.0
    w0: float = 0.0

    def __post_init__(self):
        if self.T <= 0 or self.N_T0 < 1 or self.sigma < 0:
            raise ParameterError("require T > 0, N_T0 >= 1, sigma >= 0")

    def n_steps(self, level: int) -> int:
        return self.N_T0 * 2 ** level

    def dt(self, level: int) -> float:
        return self.T / self.n_steps(level)


def couple_levels(fine_noise: np.ndarray) -> np.ndarray:
    """Coarse Wiener increments from fine ones: pairwise sums over sqrt(2).

    fine_noise has shape (..., N, 2) with N even; the result has shape
    (..., N/2, 2) and is again standard normal.
    """
    if fine_noise.shape[-2] % 2 != 0:
        raise ParameterError("fine noise length must be even")
    return (fine_noise[..., 0::2, :] + fine_noise[..., 1::2, :]) / np.sqrt(2.0)


def simulate_forward(params: FhnParams, z: np.ndarray, level: int,
                     noise: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Integrate the system; returns (v, w, Q) for a batch of noise paths.

    noise has shape (..., N, 2) where N matches the level; v and w have shape
    (..., N+1) and Q has the batch shape.
    """
    a, b, zeta, current = (float(c) for c in np.asarray(z, dtype=float))
    n = params.n_steps(level)
    if noise.shape[-2:] != (n, 2):
        raise ParameterError(f"expected noise shape (..., {n}, 2), got {noise.shape}")
    dt = params.dt(level)
    sq = params.sigma * np.sqrt(dt)
    batch = noise.shape[:-2]
    v = np.empty(batch + (n + 1,))
    w = np.empty(batch + (n + 1,))
    v[..., 0] = params.v0
    w[..., 0] = params.w0
    for step in range(n):
        vn = v[..., step]
        wn = w[..., step]
        v[..., step + 1] = vn + dt * (vn - vn ** 3 / 3.0 - wn + current) + sq * noise[..., step, 0]
        w[..., step + 1] = wn + dt * (zeta * (vn + a - b * wn)) + sq * noise[..., step, 1]
    q = ((v[..., :-1] ** 2 + v[..., 1:] ** 2) / 2.0).sum(axis=-1) * dt / params.T
    return v, w, q


def solve_adjoint(params: FhnParams, z: np.ndarray, level: int,
                  v: np.ndarray, terminal: tuple | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Backward adjoint recursion for the time-averaged QoI.

    Returns (lam, nu) with shape (..., N+1); entries 1..N are the adjoint
    states, entry 0 is unused.  `terminal` overrides the terminal condition
    (used by tests probing the linearity of the recursion).
    """
    a, b, zeta, current = (float(c) for c in np.asarray(z, dtype=float))
    n = params.n_steps(level)
    if v.shape[-1] != n + 1:
        raise ParameterError("trajectory length inconsistent with level")
    dt = params.dt(level)
    lam = np.zeros(v.shape)
    nu = np.zeros(v.shape)
    if terminal is None:
        lam[..., n] = dt * v[..., n] / params.T
        nu[..., n] = 0.0
    else:
        lam[..., n], nu[..., n] = terminal
    for step in range(n - 1, 0, -1):
        vn = v[..., step]
        ln = lam[..., step + 1]
        un = nu[..., step + 1]
        lam[..., step] = ln + dt * ((1.0 - vn ** 2) * ln + zeta * un + 2.0 * vn / params.T)
        nu[..., step] = un + dt * (-ln - zeta * b * un)
    return lam, nu


def sensitivities(params: FhnParams, z: np.ndarray, level: int,
                  v: np.ndarray, w: np.ndarray,
                  lam: np.ndarray, nu: np.ndarray) -> np.ndarray:
    """Design gradient of the QoI from forward and adjoint states.

    Returns shape (..., 4) ordered as [a, b, zeta, I].
    """
    a, b, zeta, current = (float(c) for c in np.asarray(z, dtype=float))
    dt = params.dt(level)
    nu_next = nu[..., 1:]
    lam_next = lam[..., 1:]
    vn = v[..., :-1]
    wn = w[..., :-1]
    q_a = dt * zeta * nu_next.sum(axis=-1)
    q_b = -dt * zeta * (wn * nu_next).sum(axis=-1)
    q_zeta = dt * ((vn + a - b * wn) * nu_next).sum(axis=-1)
    q_i = dt * lam_next.sum(axis=-1)
    return np.stack([q_a, q_b, q_zeta, q_i], axis=-1)


@dataclass(frozen=True)
class FhnModel(Model):
    params: FhnParams = field(default_factory=FhnParams)
    dim: int = field(default=4, init=False)
    max_level: int = 10

    def _solve(self, z, level, noise):
        v, w, q = simulate_forward(self.params, z, level, noise)
        lam, nu = solve_adjoint(self.params, z, level, v)
        grad = sensitivities(self.params, z, level, v, w, lam, nu)
        return q, grad

    def sample_pair(self, z: np.ndarray, level: int, stream: SeedStream) -> CorrelatedSample:
        self._check_level(level)
        n_fine = self.params.n_steps(level)
        noise = stream.standard_normal(n_fine, 2)
        try:
            q_f, g_f = self._solve(z, level, noise)
            if level == 0:
                if not np.isfinite(q_f):
                    raise FloatingPointError("non-finite state")
                return CorrelatedSample(float(q_f), g_f, cost=float(n_fine))
            q_c, g_c = self._solve(z, level - 1, couple_levels(noise))
            if not (np.isfinite(q_f) and np.isfinite(q_c)):
                raise FloatingPointError("non-finite state")
            return CorrelatedSample(float(q_f), g_f, cost=float(n_fine + n_fine // 2),
                                    q_coarse=float(q_c), grad_coarse=g_c)
        except FloatingPointError as exc:
            raise SampleError(str(exc), level, stream) from exc

    def sample_batch(self, z, level, master_seed, n, replica_tag=0, start_index=0):
        # Same arithmetic as sample_pair, vectorised over the sample axis.
        self._check_level(level)
        n_fine = self.params.n_steps(level)
        noise = np.empty((n, n_fine, 2))
        for i in range(n):
            stream = derive_stream(master_seed, level, start_index + i, replica_tag)
            noise[i] = stream.standard_normal(n_fine, 2)
        q_f, g_f = self._solve(z, level, noise)
        if level == 0:
            costs = np.full(n, float(n_fine))
            batch = LevelBatch(level, q_f, g_f, costs)
        else:
            q_c, g_c = self._solve(z, level - 1, couple_levels(noise))
            costs = np.full(n, float(n_fine + n_fine // 2))
            batch = LevelBatch(level, q_f, g_f, costs, q_c, g_c)
        if not np.all(np.isfinite(batch.q_fine)):
            bad = int(np.flatnonzero(~np.isfinite(batch.q_fine))[0])
            raise SampleError("non-finite state", level,
                              derive_stream(master_seed, level, start_index + bad, replica_tag))
        return batch
