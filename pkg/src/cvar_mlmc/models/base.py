"""Abstract contract for stochastic models and a linear-Gaussian benchmark.

A model produces, for a design z and a level l, a coupled pair of
(QoI, sensitivity) realisations where the fine and coarse solves share the
same underlying randomness.  Models are immutable after construction and
sampling is a pure function of (z, level, stream).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from ..rng import ParameterError, SeedStream, derive_stream


class SampleError(RuntimeError):
    """Solver failure for one sample; carries the level and seed tuple."""

    def __init__(self, msg: str, level: int, stream: SeedStream):
        super().__init__(
            f"{msg} (level={level}, seed=({stream.master_seed}, {stream.level}, "
            f"{stream.sample_index}, {stream.replica_tag}))"
        )
        self.level = level


@dataclass(frozen=True)
class CorrelatedSample:
    q_fine: float
    grad_fine: np.ndarray
    cost: float
    q_coarse: Optional[float] = None
    grad_coarse: Optional[np.ndarray] = None


@dataclass
class LevelBatch:
    """Arrays of coupled samples at one level, retained for error estimation."""
    level: int
    q_fine: np.ndarray          # (N,)
    grad_fine: np.ndarray       # (N, d)
    costs: np.ndarray           # (N,)
    q_coarse: Optional[np.ndarray] = None      # (N,) when level > 0
    grad_coarse: Optional[np.ndarray] = None   # (N, d)

    @property
    def n_samples(self) -> int:
        return self.q_fine.size

    @property
    def total_cost(self) -> float:
        return float(self.costs.sum())

    def subset(self, idx: np.ndarray) -> "LevelBatch":
        return LevelBatch(
            level=self.level,
            q_fine=self.q_fine[idx],
            grad_fine=self.grad_fine[idx],
            costs=self.costs[idx],
            q_coarse=None if self.q_coarse is None else self.q_coarse[idx],
            grad_coarse=None if self.grad_coarse is None else self.grad_coarse[idx],
        )


class Model:
    """Base class; subclasses set `dim` and `max_level` and implement sample_pair."""

    dim: int = 1
    max_level: int = 10
    refinement_factor: int = 2

    def sample_pair(self, z: np.ndarray, level: int, stream: SeedStream) -> CorrelatedSample:
        raise NotImplementedError

    def _check_level(self, level: int):
        if not 0 <= level <= self.max_level:
            raise ParameterError(f"level {level} outside [0, {self.max_level}]")

    def sample_batch(self, z: np.ndarray, level: int, master_seed: int,
                     n: int, replica_tag: int = 0, start_index: int = 0) -> LevelBatch:
        """Draw n coupled samples at a level using per-sample streams.

        Subclasses may override with a vectorised implementation, but must
        produce bit-identical results to this per-sample loop.
        """
        self._check_level(level)
        q_fine = np.empty(n)
        grad_fine = np.empty((n, self.dim))
        costs = np.empty(n)
        q_coarse = np.empty(n) if level > 0 else None
        grad_coarse = np.empty((n, self.dim)) if level > 0 else None
        for i in range(n):
            stream = derive_stream(master_seed, level, start_index + i, replica_tag)
            s = self.sample_pair(z, level, stream)
            q_fine[i] = s.q_fine
            grad_fine[i] = s.grad_fine
            costs[i] = s.cost
            if level > 0:
                q_coarse[i] = s.q_coarse
                grad_coarse[i] = s.grad_coarse
        return LevelBatch(level, q_fine, grad_fine, costs, q_coarse, grad_coarse)


def coupling_report(model: Model, z: np.ndarray, levels: int, samples_per_level: int,
                    seed: int) -> list[dict]:
    """Per-level mean/variance of the fine-coarse difference and average cost."""
    if levels < 2 or samples_per_level < 2:
        raise ParameterError("need levels >= 2 and samples_per_level >= 2")
    rows = []
    for level in range(1, levels + 1):
        batch = model.sample_batch(z, level, seed, samples_per_level)
        diff = batch.q_fine - batch.q_coarse
        rows.append({
            "level": level,
            "diff_mean": float(diff.mean()),
            "diff_var": float(diff.var(ddof=1)),
            "mean_cost": float(batch.costs.mean()),
        })
    return rows


@dataclass(frozen=True)
class LinearGaussianModel(Model):
    """Benchmark with Q(z, w) = z + sigma_b * xi, exact at every level.

    Closed forms used as oracles:
      q_tau(z) = z + sigma_b * Ninv(tau)
      c_tau(z) = z + sigma_b * npdf(Ninv(tau)) / (1 - tau)
    and the penalised optimum sits at z_ref - 1/(2 kappa).
    """
    sigma_b: float = 0.1
    dim: int = field(default=1, init=False)
    max_level: int = field(default=10, init=False)

    def sample_pair(self, z: np.ndarray, level: int, stream: SeedStream) -> CorrelatedSample:
        self._check_level(level)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        xi = float(stream.standard_normal(1)[0])
        q = float(z[0]) + self.sigma_b * xi
        grad = np.ones(1)
        if level == 0:
            return CorrelatedSample(q, grad, cost=1.0)
        return CorrelatedSample(q, grad, cost=2.0, q_coarse=q, grad_coarse=grad.copy())

    def sample_batch(self, z, level, master_seed, n, replica_tag=0, start_index=0):
        self._check_level(level)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        xi = np.empty(n)
        for i in range(n):
            stream = derive_stream(master_seed, level, start_index + i, replica_tag)
            xi[i] = stream.standard_normal(1)[0]
        q = z[0] + self.sigma_b * xi
        grad = np.ones((n, 1))
        if level == 0:
            return LevelBatch(level, q, grad, np.ones(n))
        return LevelBatch(level, q, grad, np.full(n, 2.0), q.copy(), grad.copy())

    def var_cvar(self, z: float, tau: float) -> tuple[float, float]:
        zq = norm.ppf(tau)
        return z + self.sigma_b * zq, z + self.sigma_b * norm.pdf(zq) / (1.0 - tau)
