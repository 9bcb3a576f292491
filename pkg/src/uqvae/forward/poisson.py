"""Log-diffusion estimation problem on the unit square.

Piecewise-linear finite elements on a structured triangulation of
(0,1)^2 solve

    -div(e^u grad y) = (17/4) pi^2 sin(2 pi x1) sin(2 pi x2),   y = 0 on the boundary,

where the nodal values of the log-diffusion field u are the unknowns of
the inverse problem. The prior covariance comes from a fractional inverse
power of an assembled elliptic operator with Robin boundary conditions
(beta tempers boundary artifacts).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ..bayes import GaussianModel
from ..errors import SolverFailure
from ..linalg import SPDMatrix, generalized_fractional_inverse_power
from . import ForwardModel


def source_term(x1, x2):
    return 4.25 * np.pi**2 * np.sin(2 * np.pi * x1) * np.sin(2 * np.pi * x2)


@dataclass
class PoissonSetup:
    """Mesh, operator, and observation configuration."""

    n: int = 9  # nodes per side; D = n^2
    gamma: float = 0.1
    delta: float = 0.5
    beta: float | None = None  # Robin coefficient; default sqrt(gamma*delta)
    xi: float = 1.5  # prior exponent
    n_obs: int = 20
    obs_seed: int = 0
    obs_points: np.ndarray | None = None  # (O, 2), overrides the seeded draw

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need at least a 3x3 grid")
        if self.beta is None:
            self.beta = float(np.sqrt(self.gamma * self.delta))
        if self.obs_points is None:
            rng = np.random.default_rng(self.obs_seed)
            self.obs_points = rng.uniform(0.05, 0.95, size=(self.n_obs, 2))
        else:
            self.obs_points = np.asarray(self.obs_points, dtype=float)
            self.n_obs = self.obs_points.shape[0]

    @property
    def dofs(self) -> int:
        return self.n * self.n


class _Mesh:
    """Structured triangulation; node id = ix * n + iy."""

    def __init__(self, n: int):
        self.n = n
        self.h = 1.0 / (n - 1)
        ix, iy = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        self.coords = np.column_stack([ix.ravel() * self.h, iy.ravel() * self.h])
        cell_ix, cell_iy = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
        v00 = (cell_ix * n + cell_iy).ravel()
        v10 = v00 + n
        v01 = v00 + 1
        v11 = v10 + 1
        # diagonal from v00 to v11
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        self.tris = np.vstack([lower, upper])
        self.interior = (
            (ix.ravel() > 0) & (ix.ravel() < n - 1)
            & (iy.ravel() > 0) & (iy.ravel() < n - 1)
        )
        # per-triangle P1 geometry
        p = self.coords[self.tris]  # (ne, 3, 2)
        x, y = p[:, :, 0], p[:, :, 1]
        self.area = 0.5 * np.abs(
            (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
            - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
        )
        gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
        gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
        self.grads = np.stack([gx, gy], axis=2) / (2.0 * self.area)[:, None, None]
        self.centroids = p.mean(axis=1)
        # local stiffness for unit coefficient: area * g_i . g_j
        self.k_local_unit = (
            np.einsum("eic,ejc->eij", self.grads, self.grads) * self.area[:, None, None]
        )
        self._rows = np.repeat(self.tris, 3, axis=1).ravel()
        self._cols = np.tile(self.tris, (1, 3)).ravel()
        # boundary edges for the Robin term
        edges = []
        for k in range(n - 1):
            edges.append((k * n + 0, (k + 1) * n + 0))          # y = 0
            edges.append((k * n + n - 1, (k + 1) * n + n - 1))  # y = 1
            edges.append((0 * n + k, 0 * n + k + 1))            # x = 0
            edges.append(((n - 1) * n + k, (n - 1) * n + k + 1))  # x = 1
        self.bnd_edges = np.asarray(edges)

    def scatter(self, k_local: np.ndarray) -> np.ndarray:
        k = np.zeros((self.n**2, self.n**2))
        np.add.at(k, (self._rows, self._cols), k_local.ravel())
        return k

    def stiffness(self, coeff_per_element: np.ndarray | float = 1.0) -> np.ndarray:
        return self.scatter(self.k_local_unit * np.asarray(coeff_per_element).reshape(-1, 1, 1))

    def mass(self) -> np.ndarray:
        m_ref = (np.ones((3, 3)) + np.eye(3)) / 12.0
        return self.scatter(self.area[:, None, None] * m_ref)

    def boundary_mass(self) -> np.ndarray:
        b = np.zeros((self.n**2, self.n**2))
        m_ref = self.h / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
        for i, j in self.bnd_edges:
            b[np.ix_([i, j], [i, j])] += m_ref
        return b

    def load(self) -> np.ndarray:
        f = np.zeros(self.n**2)
        vals = source_term(self.centroids[:, 0], self.centroids[:, 1]) * self.area / 3.0
        np.add.at(f, self.tris.ravel(), np.repeat(vals, 3))
        return f

    def interpolation_matrix(self, points: np.ndarray) -> np.ndarray:
        """Rows evaluate the P1 interpolant at the given points."""
        n, h = self.n, self.h
        p = np.zeros((points.shape[0], n * n))
        for row, (x, y) in enumerate(points):
            ix = min(int(x / h), n - 2)
            iy = min(int(y / h), n - 2)
            s, t = x / h - ix, y / h - iy
            v00 = ix * n + iy
            v10, v01, v11 = v00 + n, v00 + 1, v00 + n + 1
            if s >= t:  # lower triangle (v00, v10, v11)
                p[row, v00], p[row, v10], p[row, v11] = 1 - s, s - t, t
            else:  # upper triangle (v00, v11, v01)
                p[row, v00], p[row, v11], p[row, v01] = 1 - t, s, t - s
        return p


@dataclass
class PoissonAssembly:
    """Everything reusable across forward evaluations."""

    mesh: _Mesh
    mass_mat: np.ndarray
    stiffness_unit: np.ndarray
    boundary_mass: np.ndarray
    load_vec: np.ndarray
    obs_matrix: np.ndarray


def poisson_assemble(setup: PoissonSetup) -> PoissonAssembly:
    mesh = _Mesh(setup.n)
    return PoissonAssembly(
        mesh=mesh,
        mass_mat=mesh.mass(),
        stiffness_unit=mesh.stiffness(1.0),
        boundary_mass=mesh.boundary_mass(),
        load_vec=mesh.load(),
        obs_matrix=mesh.interpolation_matrix(setup.obs_points),
    )


def solve_state(mesh: _Mesh, u_nodal: np.ndarray, load_vec: np.ndarray) -> np.ndarray:
    """FE solution with diffusion e^u (centroid-evaluated) and zero Dirichlet data."""
    coeff = np.exp(u_nodal[mesh.tris].mean(axis=1))
    k = mesh.stiffness(coeff)
    idx = np.flatnonzero(mesh.interior)
    try:
        factor = cho_factor(k[np.ix_(idx, idx)], lower=True)
        y_int = cho_solve(factor, load_vec[idx])
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        raise SolverFailure(str(exc)) from exc
    y = np.zeros(mesh.n**2)
    y[idx] = y_int
    return y


class PoissonModel(ForwardModel):
    """Nodal log-diffusion field -> FE solution sampled at the observation points."""

    def __init__(self, setup: PoissonSetup):
        assembly = poisson_assemble(setup)
        super().__init__(setup.dofs, setup.n_obs, name="poisson")
        self.setup = setup
        self.assembly = assembly

    def solve_field(self, u: np.ndarray) -> np.ndarray:
        return solve_state(self.assembly.mesh, np.asarray(u, float),
                           self.assembly.load_vec)

    def _eval_many(self, u_rows):
        out = np.empty((u_rows.shape[0], self.O))
        for i, u in enumerate(u_rows):
            out[i] = self.assembly.obs_matrix @ self.solve_field(u)
        return out


def save_obs_points(path, points: np.ndarray) -> None:
    """Observation-point file: JSON list of [x1, x2] pairs."""
    import json

    with open(path, "w") as fh:
        json.dump(np.asarray(points, float).tolist(), fh)


def load_obs_points(path) -> np.ndarray:
    import json

    with open(path) as fh:
        pts = np.asarray(json.load(fh), dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("observation-point file must hold [x1, x2] pairs")
    return pts


def poisson_prior(setup: PoissonSetup, assembly: PoissonAssembly | None = None
                  ) -> GaussianModel:
    """Zero-mean nodal prior with covariance (gamma K + delta M + beta B)^-xi
    in the mass-weighted generalized sense."""
    assembly = assembly or poisson_assemble(setup)
    op = (
        setup.gamma * assembly.stiffness_unit
        + setup.delta * assembly.mass_mat
        + setup.beta * assembly.boundary_mass
    )
    gamma_pr = generalized_fractional_inverse_power(
        op, SPDMatrix(assembly.mass_mat), setup.xi
    )
    return GaussianModel(np.zeros(setup.dofs), gamma_pr)
