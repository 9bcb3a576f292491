"""Quasi-Monte Carlo machinery: Sobol streams, Gaussian sampling, and the
likelihood-weighted posterior-moment oracle.

The oracle brute-forces posterior mean and covariance by weighting prior
samples with the noise likelihood; it is the desk-scale ground truth the
learned posteriors are compared against. All weight handling happens in
log space with max-subtraction, and an effective-sample-size diagnostic
turns silent weight collapse into a loud error.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import ndtri
from scipy.stats import qmc as _scipy_qmc

from .bayes import GaussianModel
from .errors import (
    BoundaryPoint,
    DegenerateWeights,
    DimensionUnsupported,
    ForwardFailure,
)
from .forward import ForwardModel

# scipy ships the Joe-Kuo direction numbers (new-joe-kuo-6.21201); see
# the README for provenance notes.
TABLE_ID = "new-joe-kuo-6.21201"
MAX_DIM = 21201


class SobolStream:
    """Stateful unscrambled Sobol sequence.

    Index 0 (the all-zeros point) is skipped by default so every emitted
    point lies strictly inside (0,1)^dim and survives the inverse normal
    CDF. Deterministic given (dimension, skip).
    """

    def __init__(self, dim: int, skip: int = 1):
        if not 1 <= dim <= MAX_DIM:
            raise DimensionUnsupported(
                f"dim={dim} outside supported range 1..{MAX_DIM}"
            )
        self.dim = dim
        self.skip = skip
        self.table_id = TABLE_ID
        self._engine = _scipy_qmc.Sobol(d=dim, scramble=False)
        if skip:
            self._engine.fast_forward(skip)
        self.index = skip

    def take(self, n: int) -> np.ndarray:
        """Next ``n`` points, shape (n, dim)."""
        with warnings.catch_warnings():
            # the balance warning for non power-of-two draws is irrelevant
            # for streaming use
            warnings.simplefilter("ignore", UserWarning)
            pts = self._engine.random(n)
        self.index += n
        return pts

    def next_point(self) -> np.ndarray:
        return self.take(1)[0]


def sobol_next(stream: SobolStream) -> np.ndarray:
    return stream.next_point()


def gaussian_from_uniform(p, model: GaussianModel) -> np.ndarray:
    """Map uniform points through the inverse normal CDF into a Gaussian.

    ``p`` is one point or a batch of points strictly inside (0,1)^dim;
    returns mean + chol @ ndtri(p) rows.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise BoundaryPoint("uniform point on the boundary of (0,1)^d")
    eps = ndtri(p)
    return model.mean + eps @ model.cov.chol.T


class GaussianSobolStream:
    """Sobol-driven stream of Gaussian samples from a fixed model."""

    def __init__(self, model: GaussianModel, skip: int = 1):
        self.model = model
        self.stream = SobolStream(model.dim, skip=skip)

    def take(self, n: int) -> np.ndarray:
        return gaussian_from_uniform(self.stream.take(n), self.model)


@dataclass
class OracleResult:
    mean: np.ndarray
    cov: np.ndarray
    ess: float
    n_points: int

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "cov": {"rows": self.cov.shape[0], "cols": self.cov.shape[1],
                    "data": self.cov.ravel().tolist()},
            "ess": self.ess,
            "n_points": self.n_points,
        }


def log_weights_to_weights(logw: np.ndarray) -> np.ndarray:
    """Exponentiate shifted log-weights; invariant to constant offsets."""
    return np.exp(logw - logw.max())


def posterior_oracle(
    y,
    forward: ForwardModel,
    prior: GaussianModel,
    noise: GaussianModel,
    n_points: int,
    skip: int = 1,
    batch: int = 4096,
) -> OracleResult:
    """Self-normalized posterior moments from likelihood-weighted prior samples.

    Samples the prior with a Sobol-Gaussian stream, weights each sample by
    the noise density of the data misfit (computed in log space), and
    returns the weighted mean/covariance plus the effective sample size
    (sum w)^2 / sum w^2. Raises DegenerateWeights when ess < 2.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    y = np.asarray(y, dtype=float)
    stream = GaussianSobolStream(prior, skip=skip)
    us = np.empty((n_points, prior.dim))
    logw = np.empty(n_points)
    done = 0
    while done < n_points:
        n = min(batch, n_points - done)
        u = stream.take(n)
        f = forward.eval_many(u)
        r = y - f - noise.mean
        # -(1/2) r^T Ge^-1 r ; the normalizing constant cancels
        sol = solve_triangular(noise.cov.chol, r.T, lower=True)
        logw[done : done + n] = -0.5 * np.sum(sol * sol, axis=0)
        us[done : done + n] = u
        done += n
    if not np.isfinite(logw).all():
        raise ForwardFailure("non-finite log-weights in posterior oracle")
    w = log_weights_to_weights(logw)
    sw = w.sum()
    ess = float(sw * sw / (w @ w))
    if ess < 2.0:
        raise DegenerateWeights(f"effective sample size {ess:.2f} < 2")
    wn = w / sw
    mean = wn @ us
    centered = us - mean
    cov = (centered * wn[:, None]).T @ centered
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    if diag.min() < -1e-12:
        warnings.warn("oracle covariance diagonal clipped at zero")
    np.fill_diagonal(cov, np.maximum(diag, 0.0))
    return OracleResult(mean=mean, cov=cov, ess=ess, n_points=n_points)


def forward_uq(
    posterior: GaussianModel,
    simulate,
    n_samples: int,
    skip: int = 1,
    max_failure_frac: float = 0.01,
) -> dict[str, dict[str, np.ndarray]]:
    """Pointwise-in-time mean/std of simulated series under a posterior.

    ``simulate`` maps a parameter vector to a dict of named 1d series (all
    the same length across samples). Failed simulations are counted and
    tolerated up to ``max_failure_frac`` of the draws.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    stream = GaussianSobolStream(posterior, skip=skip)
    draws = stream.take(n_samples)
    sums: dict[str, np.ndarray] = {}
    sqsums: dict[str, np.ndarray] = {}
    failures = 0
    n_ok = 0
    for u in draws:
        try:
            series = simulate(u)
        except ForwardFailure:
            failures += 1
            if failures > max_failure_frac * n_samples:
                raise ForwardFailure(
                    f"{failures}/{n_samples} simulations failed"
                )
            continue
        n_ok += 1
        for key, arr in series.items():
            arr = np.asarray(arr, dtype=float)
            if key not in sums:
                sums[key] = np.zeros_like(arr)
                sqsums[key] = np.zeros_like(arr)
            sums[key] += arr
            sqsums[key] += arr * arr
    out = {}
    for key in sums:
        mean = sums[key] / n_ok
        var = np.maximum(sqsums[key] / n_ok - mean * mean, 0.0)
        out[key] = {"mean": mean, "std": np.sqrt(var)}
    return out
