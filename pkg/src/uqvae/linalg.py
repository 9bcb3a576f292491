"""Dense real linear algebra primitives used by every other module.

Everything is float64 numpy. Factorizations delegate to LAPACK (via
numpy/scipy) with explicit, scale-invariant validity checks layered on
top so that invalid covariances fail loudly instead of propagating
garbage.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NonPositiveSpectrum,
    NotPositiveDefinite,
)

# Pivot acceptance for Cholesky: pivot > PIVOT_RTOL * max(diag).
PIVOT_RTOL = 1e-14
SYMMETRY_RTOL = 1e-10


def _as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a matrix, got ndim={a.ndim}")
    return a


def check_symmetric(a: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"matrix is {a.shape}, not square")
    scale = max(np.abs(a).max(), 1.0)
    if np.abs(a - a.T).max() > rtol * scale:
        raise NotPositiveDefinite(
            f"matrix is not symmetric within rtol={rtol:g}"
        )
    return a


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises NotPositiveDefinite when any pivot falls at or below
    ``PIVOT_RTOL * max(diag)``, which rejects numerically singular
    covariances independently of their overall scale.
    """
    a = check_symmetric(a)
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    pivots = np.diag(chol) ** 2
    tol = PIVOT_RTOL * np.diag(a).max()
    if np.any(pivots <= tol):
        raise NotPositiveDefinite(
            f"pivot {pivots.min():.3e} <= tolerance {tol:.3e}"
        )
    return chol


class SPDMatrix:
    """Symmetric positive definite matrix with its cached Cholesky factor.

    Construction validates symmetry and positive definiteness; ``chol``
    is the lower factor with ``chol @ chol.T == mat``.
    """

    __slots__ = ("mat", "chol")

    def __init__(self, mat, chol: np.ndarray | None = None):
        self.mat = check_symmetric(mat)
        self.chol = cholesky(self.mat) if chol is None else np.asarray(chol, float)

    @classmethod
    def from_cholesky(cls, chol) -> "SPDMatrix":
        chol = np.asarray(chol, dtype=float)
        obj = cls.__new__(cls)
        obj.mat = chol @ chol.T
        obj.chol = chol
        return obj

    @property
    def dim(self) -> int:
        return self.mat.shape[0]

    def solve(self, b) -> np.ndarray:
        """Solve ``self @ x = b`` through the cached factor."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(
                f"rhs has leading dim {b.shape[0]}, matrix is {self.dim}"
            )
        z = solve_triangular(self.chol, b, lower=True)
        return solve_triangular(self.chol.T, z, lower=False)

    def inv(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def __repr__(self) -> str:  # pragma: no cover
        return f"SPDMatrix(dim={self.dim})"


def solve_spd(a: SPDMatrix, b) -> np.ndarray:
    """Solve ``a @ x = b`` for SPD ``a``; ``b`` may be a vector or matrix."""
    if not isinstance(a, SPDMatrix):
        a = SPDMatrix(a)
    return a.solve(b)


def sym_eig(a) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix.

    Returns (eigenvalues ascending, orthonormal eigenvectors as columns).
    """
    a = check_symmetric(a)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return w, v


def generalized_fractional_inverse_power(k, m: SPDMatrix, xi: float) -> SPDMatrix:
    """Fractional inverse power of an operator pencil.

    Given symmetric ``k`` and SPD ``m``, solves the generalized problem
    ``k v = lam m v`` with ``v^T m v = 1`` and returns
    ``V diag(lam^-xi) V^T``. Used to turn an assembled elliptic operator
    into a covariance matrix.
    """
    k = check_symmetric(k)
    if not isinstance(m, SPDMatrix):
        m = SPDMatrix(m)
    if k.shape[0] != m.dim:
        raise DimensionMismatch(f"k is {k.shape}, m is {m.dim}x{m.dim}")
    if xi <= 0:
        raise ValueError("xi must be positive")
    # congruence reduction: S = L^-1 K L^-T with M = L L^T
    li_k = solve_triangular(m.chol, k, lower=True)
    s = solve_triangular(m.chol, li_k.T, lower=True).T
    s = 0.5 * (s + s.T)
    lam, w = sym_eig(s)
    if lam.min() <= 0:
        raise NonPositiveSpectrum(
            f"generalized eigenvalue {lam.min():.3e} <= 0"
        )
    v = solve_triangular(m.chol.T, w, lower=False)
    gamma = (v * lam ** (-xi)) @ v.T
    return SPDMatrix(0.5 * (gamma + gamma.T))


def mahalanobis_sq(v, g: SPDMatrix) -> float:
    """Quadratic form ``v^T g^-1 v`` evaluated through triangular solves."""
    v = np.asarray(v, dtype=float)
    if not isinstance(g, SPDMatrix):
        g = SPDMatrix(g)
    if v.shape[0] != g.dim:
        raise DimensionMismatch(f"vector dim {v.shape[0]} != matrix dim {g.dim}")
    z = solve_triangular(g.chol, v, lower=True)
    return float(z @ z)


def matrix_to_json(a) -> dict:
    """Row-major JSON form: {"rows": n, "cols": m, "data": [...]}."""
    a = _as_matrix(a)
    return {"rows": a.shape[0], "cols": a.shape[1], "data": a.ravel(order="C").tolist()}


def matrix_from_json(obj: dict) -> np.ndarray:
    data = np.asarray(obj["data"], dtype=float)
    rows, cols = int(obj["rows"]), int(obj["cols"])
    if data.size != rows * cols:
        raise DimensionMismatch(
            f"matrix JSON claims {rows}x{cols} but carries {data.size} entries"
        )
    return data.reshape(rows, cols)


def save_matrix(path, a) -> None:
    with open(path, "w") as fh:
        json.dump(matrix_to_json(a), fh)


def load_matrix(path) -> np.ndarray:
    with open(path) as fh:
        return matrix_from_json(json.load(fh))
