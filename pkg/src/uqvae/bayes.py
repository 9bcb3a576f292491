"""Gaussian priors and noise, affine closed forms, and dataset plumbing.

The affine case admits closed-form posterior mean and covariance; those
serve as ground truth when validating the variational losses. The
normalization algebra maps priors and noise into the [0,1]-scaled space
the networks train in, and back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize

from .errors import (
    DegenerateSpread,
    DimensionMismatch,
    ForwardFailure,
    InsufficientSamples,
    ZeroReference,
    ZeroSignal,
)
from .forward import AffineModel, ForwardModel
from .linalg import SPDMatrix, mahalanobis_sq


@dataclass
class GaussianModel:
    """Mean vector plus SPD covariance."""

    mean: np.ndarray
    cov: SPDMatrix

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        if not isinstance(self.cov, SPDMatrix):
            self.cov = SPDMatrix(self.cov)
        if self.mean.shape[0] != self.cov.dim:
            raise DimensionMismatch(
                f"mean dim {self.mean.shape[0]} != cov dim {self.cov.dim}"
            )

    @property
    def dim(self) -> int:
        return self.cov.dim

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        eps = rng.standard_normal((n, self.dim))
        return self.mean + eps @ self.cov.chol.T


def map_laplace_affine(
    fwd: AffineModel, prior: GaussianModel, noise: GaussianModel, y
) -> tuple[np.ndarray, SPDMatrix]:
    """Closed-form posterior (MAP mean, covariance) for an affine forward map.

    gamma = (F^T Ge^-1 F + Gpr^-1)^-1
    u     = gamma (F^T Ge^-1 (y - f - mu_E) + Gpr^-1 mu_pr)
    """
    y = np.asarray(y, dtype=float)
    if y.shape[0] != fwd.O or prior.dim != fwd.D or noise.dim != fwd.O:
        raise DimensionMismatch("map_laplace_affine: inconsistent dimensions")
    ge_inv_f = noise.cov.solve(fwd.F)
    precision = fwd.F.T @ ge_inv_f + prior.cov.inv()
    gamma_lap = SPDMatrix(np.linalg.inv(precision))
    rhs = fwd.F.T @ noise.cov.solve(y - fwd.f - noise.mean) + prior.cov.solve(prior.mean)
    u_map = gamma_lap.mat @ rhs
    return u_map, gamma_lap


def neg_log_posterior(
    fwd: ForwardModel, prior: GaussianModel, noise: GaussianModel, y, u
) -> float:
    """Misfit plus prior penalty (twice the negative log posterior, up to a constant)."""
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    r = y - fwd.eval(u) - noise.mean
    return mahalanobis_sq(r, noise.cov) + mahalanobis_sq(u - prior.mean, prior.cov)


def map_estimate(
    fwd: ForwardModel,
    prior: GaussianModel,
    noise: GaussianModel,
    y,
    u0=None,
    gtol: float = 1e-10,
) -> np.ndarray:
    """MAP point by quasi-Newton minimization with analytic gradients."""
    y = np.asarray(y, dtype=float)
    u0 = prior.mean if u0 is None else np.asarray(u0, dtype=float)

    def fun(u):
        # overflowing trial steps return a huge value so the line search
        # backtracks instead of aborting the solve
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                r = y - fwd.eval(u) - noise.mean
                val = mahalanobis_sq(r, noise.cov) + mahalanobis_sq(
                    u - prior.mean, prior.cov
                )
                if not np.isfinite(val):
                    return 1e30, np.zeros_like(u)
                jac = fwd.jacobian(u)
                grad = -2.0 * jac.T @ noise.cov.solve(r) \
                    + 2.0 * prior.cov.solve(u - prior.mean)
        except ForwardFailure:
            return 1e30, np.zeros_like(u)
        return val, grad

    res = minimize(fun, u0, jac=True, method="L-BFGS-B",
                   options={"gtol": gtol, "maxiter": 2000})
    return res.x


def laplace_covariance(
    fwd: ForwardModel, prior: GaussianModel, noise: GaussianModel, u_map
) -> SPDMatrix:
    """Curvature-based posterior covariance at a MAP point."""
    jac = fwd.jacobian(np.asarray(u_map, dtype=float))
    precision = jac.T @ noise.cov.solve(jac) + prior.cov.inv()
    precision = 0.5 * (precision + precision.T)
    return SPDMatrix(np.linalg.inv(precision))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    """Paired parameter / observation samples with provenance."""

    params: np.ndarray  # (M, D)
    clean_obs: np.ndarray  # (M, O)
    noisy_obs: np.ndarray  # (M, O)
    seed: int
    model_id: str
    eta: float = 0.0

    def __post_init__(self):
        m = self.params.shape[0]
        if self.clean_obs.shape[0] != m or self.noisy_obs.shape[0] != m:
            raise DimensionMismatch("dataset fields disagree on sample count")

    @property
    def size(self) -> int:
        return self.params.shape[0]

    def subset(self, n: int) -> "Dataset":
        return replace(
            self,
            params=self.params[:n],
            clean_obs=self.clean_obs[:n],
            noisy_obs=self.noisy_obs[:n],
        )


def generate_dataset(
    fwd: ForwardModel,
    prior: GaussianModel,
    eta: float,
    m: int,
    seed: int,
    noise_grouping: str = "per_component",
    group_size: int | None = None,
) -> tuple[Dataset, GaussianModel]:
    """Draw parameters from the prior, push them through the model, add noise.

    The noise covariance is built from the clean observations (diagonal,
    eta-scaled maxima), then applied, so it is returned alongside the data.
    """
    if eta <= 0:
        raise ZeroSignal("eta must be > 0")
    rng = np.random.default_rng(seed)
    u = prior.sample(rng, m)
    clean = fwd.eval_many(u)
    gamma_e = noise_cov_from_dataset(clean, eta, noise_grouping, group_size)
    noise = GaussianModel(np.zeros(fwd.O), gamma_e)
    eps = noise.sample(rng, m)
    ds = Dataset(u, clean, clean + eps, seed=seed, model_id=fwd.name, eta=eta)
    return ds, noise


def save_dataset(path_jsonl, path_header, ds: Dataset, extra: dict | None = None):
    with open(path_jsonl, "w") as fh:
        for u, yc, yn in zip(ds.params, ds.clean_obs, ds.noisy_obs):
            fh.write(json.dumps({"u": u.tolist(), "y_clean": yc.tolist(),
                                 "y_noisy": yn.tolist()}) + "\n")
    header = {
        "format_version": 1,
        "D": int(ds.params.shape[1]),
        "O": int(ds.clean_obs.shape[1]),
        "seed": int(ds.seed),
        "eta": float(ds.eta),
        "model": ds.model_id,
    }
    header.update(extra or {})
    with open(path_header, "w") as fh:
        json.dump(header, fh, indent=1)


def load_dataset(path_jsonl, path_header) -> tuple[Dataset, dict]:
    with open(path_header) as fh:
        header = json.load(fh)
    u, yc, yn = [], [], []
    with open(path_jsonl) as fh:
        for line in fh:
            rec = json.loads(line)
            u.append(rec["u"])
            yc.append(rec["y_clean"])
            yn.append(rec["y_noisy"])
    ds = Dataset(
        np.asarray(u, float), np.asarray(yc, float), np.asarray(yn, float),
        seed=header["seed"], model_id=header["model"], eta=header["eta"],
    )
    return ds, header


# ---------------------------------------------------------------------------
# normalization to [0,1]


@dataclass
class NormalizationMaps:
    """Elementwise scale/shift for parameters (a, b) and observations (c, d).

    Normalized values are u*a + b and y*c + d.
    """

    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.a == 0) or np.any(self.c == 0):
            raise DegenerateSpread("normalization scales must be nonzero")

    def normalize_params(self, u):
        return np.asarray(u, float) * self.a + self.b

    def denormalize_params(self, u_bar):
        return (np.asarray(u_bar, float) - self.b) / self.a

    def normalize_obs(self, y):
        return np.asarray(y, float) * self.c + self.d

    def denormalize_obs(self, y_bar):
        return (np.asarray(y_bar, float) - self.d) / self.c

    def to_json(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("a", "b", "c", "d")}

    @classmethod
    def from_json(cls, obj: dict) -> "NormalizationMaps":
        return cls(**{k: np.asarray(obj[k], float) for k in ("a", "b", "c", "d")})


def _scale_shift(values: np.ndarray, pooled: bool) -> tuple[np.ndarray, np.ndarray]:
    if pooled:
        lo, hi = values.min(), values.max()
        if hi == lo:
            raise DegenerateSpread("pooled data spread is zero")
        a = np.full(values.shape[1], 1.0 / (hi - lo))
        b = np.full(values.shape[1], -lo / (hi - lo))
    else:
        lo, hi = values.min(axis=0), values.max(axis=0)
        if np.any(hi == lo):
            raise DegenerateSpread("a component has zero spread")
        a = 1.0 / (hi - lo)
        b = -lo * a
    return a, b


def build_normalization(ds: Dataset, mode: str = "global_scalar") -> NormalizationMaps:
    """Scale parameters and noisy observations into [0,1].

    ``global_scalar`` pools min/max over all components and samples (one
    scalar scale for parameters and one for observations);
    ``per_component`` uses per-coordinate extrema, which is the only sane
    choice when the observation vector mixes units.
    """
    if ds.size < 2:
        raise InsufficientSamples("normalization needs at least 2 samples")
    if mode not in ("global_scalar", "per_component"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    pooled = mode == "global_scalar"
    a, b = _scale_shift(ds.params, pooled)
    c, d = _scale_shift(ds.noisy_obs, pooled)
    return NormalizationMaps(a, b, c, d)


def normalize_models(
    prior: GaussianModel, noise: GaussianModel, maps: NormalizationMaps
) -> tuple[GaussianModel, GaussianModel]:
    """Transform prior and noise models into the normalized scale.

    Means scale elementwise (the shift applies to the prior only: noise is
    a difference of observations, so the d offset cancels); covariances
    pick up the outer product of the scales.
    """
    prior_bar = GaussianModel(
        prior.mean * maps.a + maps.b,
        SPDMatrix(prior.cov.mat * np.outer(maps.a, maps.a)),
    )
    noise_bar = GaussianModel(
        noise.mean * maps.c,
        SPDMatrix(noise.cov.mat * np.outer(maps.c, maps.c)),
    )
    return prior_bar, noise_bar


def denormalize_posterior(
    mu_bar, gamma_bar, maps: NormalizationMaps
) -> tuple[np.ndarray, SPDMatrix]:
    """Map posterior moments from the normalized scale back to the original."""
    mu = (np.asarray(mu_bar, float) - maps.b) / maps.a
    g = gamma_bar.mat if isinstance(gamma_bar, SPDMatrix) else np.asarray(gamma_bar, float)
    inv_a = 1.0 / maps.a
    return mu, SPDMatrix(g * np.outer(inv_a, inv_a))


# ---------------------------------------------------------------------------
# noise construction and error metrics


def noise_cov_from_dataset(
    clean_obs, eta: float, grouping: str = "per_component",
    group_size: int | None = None,
) -> SPDMatrix:
    """Diagonal noise covariance with eta-scaled maxima of |clean obs|.

    ``per_component``: entry i uses the max over samples of |y_i|.
    ``per_state_group``: components are pooled in consecutive blocks of
    ``group_size`` (observations of the same underlying quantity share one
    variance); ``group_size == O`` pools everything into a single max.
    """
    clean_obs = np.asarray(clean_obs, dtype=float)
    if eta <= 0:
        raise ZeroSignal("eta must be > 0")
    o = clean_obs.shape[1]
    amax = np.abs(clean_obs).max(axis=0)
    if grouping == "per_component":
        level = amax
    elif grouping == "per_state_group":
        if group_size is None or group_size < 1 or o % group_size:
            raise DimensionMismatch(
                f"group_size must divide O={o}, got {group_size}"
            )
        level = amax.reshape(o // group_size, group_size).max(axis=1)
        level = np.repeat(level, group_size)
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    if np.any(level == 0):
        raise ZeroSignal("an observation component is identically zero")
    return SPDMatrix(np.diag((eta * level) ** 2))


def rel_error_vec(estimate, reference) -> tuple[np.ndarray, float]:
    """Componentwise |est - ref| / ||ref||_inf and its maximum."""
    estimate = np.asarray(estimate, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if estimate.shape != reference.shape:
        raise DimensionMismatch("rel_error_vec: shape mismatch")
    denom = np.abs(reference).max()
    if denom == 0:
        raise ZeroReference("reference vector is all zero")
    err = np.abs(estimate - reference) / denom
    return err, float(err.max())


def rel_error_var(gamma_est: SPDMatrix, var_ref) -> tuple[np.ndarray, float]:
    """Same metric applied to the diagonal of a covariance estimate."""
    diag = np.diag(gamma_est.mat if isinstance(gamma_est, SPDMatrix) else gamma_est)
    return rel_error_vec(diag, var_ref)


def log_range_prior(reference: np.ndarray, low_frac, high_frac) -> GaussianModel:
    """Gaussian prior on log-parameters from multiplicative ranges.

    Parameter i varies in [low_frac_i * ref_i, high_frac_i * ref_i]; the
    prior is centered at log(ref) with the variance of a uniform on the
    log-range, (log(high_frac) - log(low_frac))^2 / 12.
    """
    reference = np.asarray(reference, dtype=float)
    low = np.broadcast_to(np.asarray(low_frac, float), reference.shape)
    high = np.broadcast_to(np.asarray(high_frac, float), reference.shape)
    if np.any(low <= 0) or np.any(high <= low):
        raise ValueError("need 0 < low_frac < high_frac")
    var = (np.log(high) - np.log(low)) ** 2 / 12.0
    return GaussianModel(np.log(reference), SPDMatrix(np.diag(var)))
