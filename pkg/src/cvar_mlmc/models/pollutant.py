"""Steady advection-diffusion pollutant model on the unit square.

Finite differences on a uniform grid: 5-point diffusion plus first-order
upwind advection, homogeneous Dirichlet on the x1 = 0 edge and mirrored-ghost
homogeneous Neumann on the remaining edges.  The design z holds the nine sink
amplitudes; sensitivities of Q = (kappa_s/2) * integral of u^2 come from one
transpose solve of the assembled operator, so they are the exact gradient of
the discrete QoI.

The velocity field is V = [b - a*x1, a*x2] with (a, b) drawn uniformly per
sample.  The source amplitudes, centres and widths are fixed constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from ..rng import ParameterError, SeedStream
from .base import CorrelatedSample, Model, SampleError

# Five Gaussian source terms: (s_i, mu_i, sigma_i).
SOURCES = (
    (2.3220339, (0.55205319, 0.65571641), 0.0229487),
    (1.7931427, (0.49379544, 0.10950509), 0.0205321),
    (2.3522452, (0.13032797, 0.57569277), 0.0196891),
    (2.2850373, (0.33868732, 0.37971428), 0.0212297),
    (2.3194400, (0.27670822, 0.15833522), 0.0227373),
)

# Sink centres on the 3x3 lattice (0.25*i, 0.25*j), shared width 0.05.
SINK_CENTRES = tuple(
    (0.25 * i, 0.25 * j) for i in (1, 2, 3) for j in (1, 2, 3)
)
SINK_WIDTH = 0.05


def mesh_side(level: int, base: int = 32) -> int:
    """Elements per side at a level; grows by sqrt(2) per level."""
    return int(round(base * 2 ** (level / 2.0)))


def _gaussian_bump(x1: np.ndarray, x2: np.ndarray, centre, width: float) -> np.ndarray:
    d2 = (x1 - centre[0]) ** 2 + (x2 - centre[1]) ** 2
    return np.exp(-d2 / (2.0 * width ** 2))


def source_field(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    f = np.zeros_like(x1)
    for s, mu, sig in SOURCES:
        f += s * _gaussian_bump(x1, x2, mu, sig)
    return f


def sink_basis(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """The nine sink bumps stacked along the last axis."""
    return np.stack([_gaussian_bump(x1, x2, p, SINK_WIDTH) for p in SINK_CENTRES], axis=-1)


@dataclass(frozen=True)
class PollutantParams:
    eps_visc: float = 0.1
    kappa_s: float = 1e4
    a_range: tuple[float, float] = (4.95, 5.05)
    b_range: tuple[float, float] = (3.95, 4.05)
    base_elements: int = 32

    def __post_init__(self):
        if self.eps_visc <= 0 or self.kappa_s <= 0:
            raise ParameterError("require eps_visc > 0 and kappa_s > 0")


class PollutantGrid:
    """Node coordinates, trapezoid weights and the assembled operator."""

    def __init__(self, params: PollutantParams, a: float, b: float, level: int):
        self.m = mesh_side(level, params.base_elements)
        self.h = 1.0 / self.m
        side = np.linspace(0.0, 1.0, self.m + 1)
        self.x1, self.x2 = np.meshgrid(side, side, indexing="ij")
        w1 = np.ones(self.m + 1)
        w1[[0, -1]] = 0.5
        self.weights = np.outer(w1, w1) * self.h ** 2
        self.dirichlet = np.zeros((self.m + 1,) * 2, dtype=bool)
        self.dirichlet[0, :] = True
        self.matrix = _assemble(params.eps_visc, a, b, self.m, self.h)

    def integrate(self, values: np.ndarray) -> float:
        return float((self.weights * values).sum())


def _assemble(eps: float, a: float, b: float, m: int, h: float) -> sp.csc_matrix:
    npts = m + 1
    idx = np.arange(npts * npts).reshape(npts, npts)
    side = np.linspace(0.0, 1.0, npts)
    x1, x2 = np.meshgrid(side, side, indexing="ij")
    v1 = b - a * x1
    v2 = a * x2

    rows, cols, vals = [], [], []

    def add(r, c, v):
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(v.ravel())

    # Neighbour index maps with mirrored ghosts at the Neumann edges.
    east = np.clip(np.arange(npts) + 1, 0, npts - 1)
    east[-1] = npts - 2
    west = np.clip(np.arange(npts) - 1, 0, npts - 1)
    iE = idx[east, :]
    iW = idx[west, :]
    jN = idx[:, east]
    jS = idx[:, west]
    jS = jS.copy()
    jS[:, 0] = idx[:, 1]   # mirror for j = 0

    interior = ~np.zeros((npts, npts), dtype=bool)
    interior[0, :] = False  # Dirichlet rows handled separately

    centre = idx[interior]
    ih2 = eps / h ** 2

    # Diffusion: -eps * 5-point Laplacian.
    add(centre, centre, np.full(centre.size, 4.0 * ih2))
    for nb in (iE, iW, jN, jS):
        add(centre, nb[interior], np.full(centre.size, -ih2))

    # Advection, first-order upwind.
    v1i = v1[interior]
    up1 = v1i >= 0
    add(centre, centre, np.abs(v1i) / h)
    add(centre[up1], iW[interior][up1], -v1i[up1] / h)
    add(centre[~up1], iE[interior][~up1], v1i[~up1] / h)

    v2i = v2[interior]
    up2 = v2i >= 0
    add(centre, centre, np.abs(v2i) / h)
    add(centre[up2], jS[interior][up2], -v2i[up2] / h)
    add(centre[~up2], jN[interior][~up2], v2i[~up2] / h)

    # Dirichlet rows: identity.
    dir_nodes = idx[0, :]
    add(dir_nodes, dir_nodes, np.ones(npts))

    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(npts * npts, npts * npts),
    )
    return mat.tocsc()


def solve_forward(params: PollutantParams, z: np.ndarray, a: float, b: float,
                  level: int, rhs_override: np.ndarray | None = None):
    """Solve the steady transport problem; returns (grid, u, Q, lu_factor)."""
    grid = PollutantGrid(params, a, b, level)
    x1, x2 = grid.x1, grid.x2
    if rhs_override is None:
        rhs = source_field(x1, x2) - sink_basis(x1, x2) @ np.asarray(z, dtype=float)
    else:
        rhs = rhs_override.copy()
    rhs[grid.dirichlet] = 0.0
    lu = splu(grid.matrix)
    u = lu.solve(rhs.ravel()).reshape(x1.shape)
    u[grid.dirichlet] = 0.0
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("linear solve produced non-finite values")
    q = 0.5 * params.kappa_s * grid.integrate(u ** 2)
    return grid, u, q, lu


def adjoint_sensitivities(params: PollutantParams, grid: PollutantGrid,
                          u: np.ndarray, lu) -> np.ndarray:
    """Gradient of Q with respect to the nine sink amplitudes.

    Solves the transposed operator with the quadrature-weighted source
    kappa_s * W u, then pairs the adjoint with each sink bump (the bumps enter
    the right-hand side with a minus sign).
    """
    src = params.kappa_s * grid.weights * u
    src[grid.dirichlet] = 0.0
    lam = lu.solve(src.ravel(), trans="T").reshape(u.shape)
    bumps = sink_basis(grid.x1, grid.x2)
    bumps[grid.dirichlet] = 0.0
    return -np.einsum("ij,ijk->k", lam, bumps)


@dataclass(frozen=True)
class PollutantModel(Model):
    params: PollutantParams = field(default_factory=PollutantParams)
    dim: int = field(default=9, init=False)
    max_level: int = 6

    def _solve_level(self, z, a, b, level):
        grid, u, q, lu = solve_forward(self.params, z, a, b, level)
        grad = adjoint_sensitivities(self.params, grid, u, lu)
        return q, grad, grid.m ** 2

    def sample_pair(self, z: np.ndarray, level: int, stream: SeedStream) -> CorrelatedSample:
        self._check_level(level)
        a = float(stream.uniform(*self.params.a_range)[0])
        b = float(stream.uniform(*self.params.b_range)[0])
        try:
            q_f, g_f, cells_f = self._solve_level(z, a, b, level)
            if level == 0:
                return CorrelatedSample(q_f, g_f, cost=float(cells_f))
            q_c, g_c, cells_c = self._solve_level(z, a, b, level - 1)
            return CorrelatedSample(q_f, g_f, cost=float(cells_f + cells_c),
                                    q_coarse=q_c, grad_coarse=g_c)
        except (FloatingPointError, RuntimeError) as exc:
            raise SampleError(str(exc), level, stream) from exc
