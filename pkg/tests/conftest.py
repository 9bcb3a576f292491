import numpy as np
import pytest

from uqvae.linalg import SPDMatrix


def random_spd(dim: int, seed: int, scale: float = 1.0) -> SPDMatrix:
    """Well-conditioned random SPD matrix: B B^T + dim * I, scaled."""
    rng = np.random.default_rng(seed)
    b = rng.standard_normal((dim, dim))
    return SPDMatrix(scale * (b @ b.T + dim * np.eye(dim)))


def random_lower(dim: int, seed: int, diag_scale: float = 0.3) -> np.ndarray:
    """Random valid Cholesky factor: lower-triangular, positive diagonal."""
    rng = np.random.default_rng(seed)
    c = np.tril(rng.standard_normal((dim, dim)) * 0.3, k=-1)
    return c + np.diag(np.exp(diag_scale * rng.standard_normal(dim)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
