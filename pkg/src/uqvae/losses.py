"""Variational training losses and posterior-recovery transforms.

Two loss families train the encoder of the autoencoder pair:

* a perturbation loss that evaluates the forward map once at the
  candidate mean and once along each scaled Cholesky column (D+1
  evaluations per loss value), with trace terms weighted by a small
  squared perturbation size ``theta``;
* the older divergence-bound loss that replaces the data expectation by a
  K-sample quasi-Monte Carlo average (K evaluations per loss value).

Each comes with exact analytic gradients with respect to the mean and the
lower-triangular factor, a closed-form map from the loss minimizer to
posterior moments, and a direct (network-free) minimizer used for
validation. Training utilities for the decoder surrogate and the encoder
live here too.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize
from scipy.special import ndtri

from . import nnet
from .bayes import GaussianModel
from .errors import (
    DivergenceDetected,
    DimensionMismatch,
    InsufficientSamples,
    SingularC,
    SingularGamma,
)
from .forward import ForwardModel, MLPModel
from .linalg import SPDMatrix
from .qmc import SobolStream

DEFAULT_THETA = 1e-4


@dataclass
class ThetaLossConfig:
    """Shared pieces of the perturbation loss: theta, map, models, data."""

    forward: ForwardModel
    prior: GaussianModel
    noise: GaussianModel
    y: np.ndarray
    theta: float = DEFAULT_THETA

    def __post_init__(self):
        if self.theta == 0:
            raise ValueError("theta must be nonzero")
        self.y = np.asarray(self.y, dtype=float)
        if self.y.shape[0] != self.forward.O:
            raise DimensionMismatch("y length != forward output dim")


@dataclass
class AlphaLossConfig:
    """Sampled divergence-bound loss configuration."""

    forward: ForwardModel
    prior: GaussianModel
    noise: GaussianModel
    y: np.ndarray
    alpha: float = 0.5
    k_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0,1)")
        if self.k_samples < 1:
            raise ValueError("k_samples must be >= 1")
        self.y = np.asarray(self.y, dtype=float)

    def draw_eps(self, stream: SobolStream | None = None) -> np.ndarray:
        """Standard-normal draws (K, D) from a Sobol stream."""
        if stream is None:
            stream = SobolStream(self.forward.D, skip=1 + self.seed)
        return ndtri(stream.take(self.k_samples))


@dataclass
class DecoderErrorModel:
    """Gaussian model of the decoder's approximation error."""

    mu_dec: np.ndarray
    gamma_dec: SPDMatrix

    def combine_with(self, noise: GaussianModel) -> GaussianModel:
        """Total observation-error model: decoder error plus measurement noise."""
        return GaussianModel(
            noise.mean + self.mu_dec,
            SPDMatrix(noise.cov.mat + self.gamma_dec.mat),
        )


def _check_lower(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    if np.any(np.triu(c, k=1) != 0.0):
        raise SingularC("C must be lower-triangular")
    if np.any(np.abs(np.diag(c)) < 1e-300):
        raise SingularC("C has a (numerically) zero diagonal entry")
    return c


# ---------------------------------------------------------------------------
# perturbation loss


def _theta_points(mu: np.ndarray, c: np.ndarray, theta: float) -> np.ndarray:
    """Rows: mu, then mu + theta * column_k(C) for k = 1..D."""
    return np.vstack([mu[None, :], mu[None, :] + theta * c.T])


def loss_theta(mu, c, cfg: ThetaLossConfig) -> tuple[float, int]:
    """Perturbation loss value; makes exactly D+1 forward evaluations.

    value = theta^2 tr(G^-1 Gpr) + |mu-mupr|^2_{Gpr^-1} + theta^2 tr(Gpr^-1 G)
          + |y - muE - F(mu)|^2_{Ge^-1}
          + sum_k |F(mu + theta C_k) - F(mu)|^2_{Ge^-1},   G = C C^T.
    """
    mu = np.asarray(mu, dtype=float)
    c = _check_lower(c)
    before = cfg.forward.call_count
    ys = cfg.forward.eval_many(_theta_points(mu, c, cfg.theta))
    calls = cfg.forward.call_count - before
    f0, fk = ys[0], ys[1:]
    lpr = cfg.prior.cov.chol
    le = cfg.noise.cov.chol
    th2 = cfg.theta**2

    s = solve_triangular(c, lpr, lower=True)
    t_trace_inv = th2 * float(np.sum(s * s))
    zmu = solve_triangular(lpr, mu - cfg.prior.mean, lower=True)
    t_prior = float(zmu @ zmu)
    t = solve_triangular(lpr, c, lower=True)
    t_trace = th2 * float(np.sum(t * t))
    r = cfg.y - cfg.noise.mean - f0
    zr = solve_triangular(le, r, lower=True)
    t_data = float(zr @ zr)
    diffs = fk - f0
    zd = solve_triangular(le, diffs.T, lower=True)
    t_spread = float(np.sum(zd * zd))
    return t_trace_inv + t_prior + t_trace + t_data + t_spread, calls


def _rowwise_vjp(fwd: ForwardModel, pts: np.ndarray, cots: np.ndarray) -> np.ndarray:
    """J(pts_i)^T cots_i per row, via vjp support or explicit Jacobians."""
    if fwd.supports_vjp:
        return fwd.vjp_many(pts, cots)
    out = np.empty((pts.shape[0], fwd.D))
    for i, (p, w) in enumerate(zip(pts, cots)):
        out[i] = fwd.jacobian(p).T @ w
    return out


def grad_loss_theta(mu, c, cfg: ThetaLossConfig) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of :func:`loss_theta` w.r.t. mu and lower-tri C."""
    mu = np.asarray(mu, dtype=float)
    c = _check_lower(c)
    d = mu.shape[0]
    th = cfg.theta
    pts = _theta_points(mu, c, th)
    ys = cfg.forward.eval_many(pts)
    f0, fk = ys[0], ys[1:]
    r = cfg.y - cfg.noise.mean - f0
    v = cfg.noise.cov.solve(r)
    w = cfg.noise.cov.solve((fk - f0).T).T  # (D, O) rows Ge^-1 (F_k - F_0)

    cots = np.empty((d + 1, cfg.forward.O))
    cots[0] = -2.0 * v - 2.0 * w.sum(axis=0)
    cots[1:] = 2.0 * w
    g = _rowwise_vjp(cfg.forward, pts, cots)

    dmu = 2.0 * cfg.prior.cov.solve(mu - cfg.prior.mean) + g.sum(axis=0)

    lpr = cfg.prior.cov.chol
    s = solve_triangular(c, lpr, lower=True)
    dc_trace_inv = -2.0 * th**2 * solve_triangular(c.T, s @ s.T, lower=False)
    t = solve_triangular(lpr, c, lower=True)
    dc_trace = 2.0 * th**2 * solve_triangular(lpr.T, t, lower=False)
    dc = dc_trace_inv + dc_trace + th * g[1:].T
    return dmu, np.tril(dc)


def recover_posterior_theta(
    mu_hat, c_hat, gamma_pr: SPDMatrix
) -> tuple[np.ndarray, SPDMatrix]:
    """Posterior moments from a perturbation-loss minimizer.

    mu_post = mu_hat;  Gamma_post = Ghat Gpr^-1 Ghat with Ghat = Chat Chat^T,
    SPD by construction for any invertible Chat.
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    c_hat = _check_lower(c_hat)
    gamma_hat = c_hat @ c_hat.T
    x = solve_triangular(gamma_pr.chol, gamma_hat, lower=True)
    return mu_hat, SPDMatrix(x.T @ x)


# ---------------------------------------------------------------------------
# sampled divergence-bound loss


def loss_alpha(mu, c, cfg: AlphaLossConfig, eps: np.ndarray | None = None
               ) -> tuple[float, int]:
    """Sampled loss value; makes exactly K forward evaluations.

    value = (1-a)(|mu-mupr|^2_{G^-1} + tr(G^-1 Gpr))
          + a (|mu-mupr|^2_{Gpr^-1} + tr(Gpr^-1 G))
          + (a/K) sum_k |y - muE - F(mu + C eps_k)|^2_{Ge^-1}.
    """
    mu = np.asarray(mu, dtype=float)
    c = _check_lower(c)
    if eps is None:
        eps = cfg.draw_eps()
    a = cfg.alpha
    lpr, le = cfg.prior.cov.chol, cfg.noise.cov.chol
    vz = solve_triangular(c, mu - cfg.prior.mean, lower=True)
    s = solve_triangular(c, lpr, lower=True)
    line1 = (1 - a) * (float(vz @ vz) + float(np.sum(s * s)))
    zmu = solve_triangular(lpr, mu - cfg.prior.mean, lower=True)
    t = solve_triangular(lpr, c, lower=True)
    line2 = a * (float(zmu @ zmu) + float(np.sum(t * t)))
    u = mu + eps @ c.T
    before = cfg.forward.call_count
    ys = cfg.forward.eval_many(u)
    calls = cfg.forward.call_count - before
    r = cfg.y - cfg.noise.mean - ys
    zr = solve_triangular(le, r.T, lower=True)
    line3 = a * float(np.mean(np.sum(zr * zr, axis=0)))
    return line1 + line2 + line3, calls


def grad_loss_alpha(mu, c, cfg: AlphaLossConfig, eps: np.ndarray | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of :func:`loss_alpha` for the given draws."""
    mu = np.asarray(mu, dtype=float)
    c = _check_lower(c)
    if eps is None:
        eps = cfg.draw_eps()
    a = cfg.alpha
    k = eps.shape[0]
    lpr = cfg.prior.cov.chol
    v = mu - cfg.prior.mean
    z = solve_triangular(c, v, lower=True)
    q = solve_triangular(c.T, z, lower=False)  # G^-1 v
    s = solve_triangular(c, lpr, lower=True)
    t = solve_triangular(lpr, c, lower=True)

    u = mu + eps @ c.T
    ys = cfg.forward.eval_many(u)
    r = cfg.y - cfg.noise.mean - ys
    w = cfg.noise.cov.solve(r.T).T  # (K, O)
    g = _rowwise_vjp(cfg.forward, u, w)  # rows J(u_k)^T Ge^-1 r_k

    dmu = (
        2.0 * (1 - a) * q
        + 2.0 * a * cfg.prior.cov.solve(v)
        - (2.0 * a / k) * g.sum(axis=0)
    )
    dc = (
        (1 - a) * (-2.0 * np.outer(q, z) - 2.0 * solve_triangular(c.T, s @ s.T, lower=False))
        + 2.0 * a * solve_triangular(lpr.T, t, lower=False)
        - (2.0 * a / k) * (g.T @ eps)
    )
    return dmu, np.tril(dc)


def loss_alpha_affine(mu, c, cfg: AlphaLossConfig) -> float:
    """Divergence-bound loss with the closed-form affine data expectation.

    For F(u) = F u + f the sample average is replaced by its exact value
    |y - muE - F mu - f|^2_{Ge^-1} + tr(Ge^-1 F G F^T).
    """
    mu = np.asarray(mu, dtype=float)
    c = _check_lower(c)
    fwd = cfg.forward
    a = cfg.alpha
    lpr, le = cfg.prior.cov.chol, cfg.noise.cov.chol
    vz = solve_triangular(c, mu - cfg.prior.mean, lower=True)
    s = solve_triangular(c, lpr, lower=True)
    line1 = (1 - a) * (float(vz @ vz) + float(np.sum(s * s)))
    zmu = solve_triangular(lpr, mu - cfg.prior.mean, lower=True)
    t = solve_triangular(lpr, c, lower=True)
    line2 = a * (float(zmu @ zmu) + float(np.sum(t * t)))
    r = cfg.y - cfg.noise.mean - fwd.F @ mu - fwd.f
    zr = solve_triangular(le, r, lower=True)
    fc = solve_triangular(le, fwd.F @ c, lower=True)
    line3 = a * (float(zr @ zr) + float(np.sum(fc * fc)))
    return line1 + line2 + line3


def grad_loss_alpha_affine(mu, c, cfg: AlphaLossConfig) -> tuple[np.ndarray, np.ndarray]:
    mu = np.asarray(mu, dtype=float)
    c = _check_lower(c)
    fwd = cfg.forward
    a = cfg.alpha
    lpr, le = cfg.prior.cov.chol, cfg.noise.cov.chol
    v = mu - cfg.prior.mean
    z = solve_triangular(c, v, lower=True)
    q = solve_triangular(c.T, z, lower=False)
    s = solve_triangular(c, lpr, lower=True)
    t = solve_triangular(lpr, c, lower=True)
    r = cfg.y - cfg.noise.mean - fwd.F @ mu - fwd.f
    dmu = (
        2.0 * (1 - a) * q
        + 2.0 * a * cfg.prior.cov.solve(v)
        - 2.0 * a * fwd.F.T @ cfg.noise.cov.solve(r)
    )
    fc = solve_triangular(le, fwd.F @ c, lower=True)
    dc = (
        (1 - a) * (-2.0 * np.outer(q, z) - 2.0 * solve_triangular(c.T, s @ s.T, lower=False))
        + 2.0 * a * solve_triangular(lpr.T, t, lower=False)
        + 2.0 * a * fwd.F.T @ solve_triangular(le.T, fc, lower=False)
    )
    return dmu, np.tril(dc)


def recover_posterior_alpha(
    mu_hat, gamma_hat, gamma_lap: SPDMatrix, mu_pr, gamma_pr: SPDMatrix,
    alpha: float,
) -> tuple[np.ndarray, SPDMatrix]:
    """Posterior moments from a divergence-bound-loss minimizer.

    mu_post    = (1-a)/a GammaLap Ghat^-1 (mu_hat - mu_pr) + mu_hat
    Gamma_post = Ghat A^-1 Ghat,
    A          = (1-a)/a ((mu_hat - mu_pr)(mu_hat - mu_pr)^T + Gpr).
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    mu_pr = np.asarray(mu_pr, dtype=float)
    gh = gamma_hat.mat if isinstance(gamma_hat, SPDMatrix) else np.asarray(gamma_hat, float)
    try:
        gh_spd = SPDMatrix(gh)
    except Exception as exc:
        raise SingularGamma(str(exc)) from exc
    ratio = (1.0 - alpha) / alpha
    v = mu_hat - mu_pr
    mu_post = ratio * gamma_lap.mat @ gh_spd.solve(v) + mu_hat
    a_mat = ratio * (np.outer(v, v) + gamma_pr.mat)
    a_spd = SPDMatrix(0.5 * (a_mat + a_mat.T))
    gamma_post = gh @ a_spd.solve(gh)
    return mu_post, SPDMatrix(0.5 * (gamma_post + gamma_post.T))


# ---------------------------------------------------------------------------
# direct (network-free) minimization in head coordinates


def _head_to_muc(x: np.ndarray, d: int) -> tuple[np.ndarray, np.ndarray]:
    out = nnet.decode_head(x, d)
    return out.mu, out.C


def _muc_grad_to_head(dmu, dc, c: np.ndarray) -> np.ndarray:
    d = dmu.shape[0]
    idx = np.arange(d)
    dsig = dc[idx, idx] * c[idx, idx]
    i, j = np.tril_indices(d, k=-1)
    return np.concatenate([dmu, dsig, dc[i, j]])


def _lbfgs(fun, x0, maxiter, gtol):
    return minimize(fun, x0, jac=True, method="L-BFGS-B",
                    options={"maxiter": maxiter, "gtol": gtol, "ftol": 1e-18})


def minimize_direct(
    value_and_grad,
    mu0: np.ndarray,
    c0: np.ndarray,
    maxiter: int = 2000,
    gtol: float = 1e-12,
    c_scale: float = 1.0,
    rounds: int = 1,
):
    """Quasi-Newton minimization over (mu, C) in head coordinates.

    The diagonal of C is optimized through its logarithm (the same
    parameterization the encoder head uses), which keeps C a valid
    Cholesky factor along the whole path. ``value_and_grad(mu, C)`` must
    return (value, dmu, dC).

    With ``rounds > 1`` the optimization alternates between a mu-block and
    a C-block, rescaling the C-block objective by ``1/c_scale``. That is
    essential when the C-sensitivity of the loss carries a tiny uniform
    factor (theta^2): jointly, quasi-Newton stalls in the flat valley; per
    block, both subproblems are well conditioned.
    """
    d = mu0.shape[0]
    x0 = nnet.encode_head(np.asarray(mu0, float), np.asarray(c0, float))

    def full_fun(x):
        mu, c = _head_to_muc(x, d)
        try:
            val, dmu, dc = value_and_grad(mu, c)
        except (SingularC, FloatingPointError):
            return 1e25, np.zeros_like(x)
        if not np.isfinite(val):
            return 1e25, np.zeros_like(x)
        return val, _muc_grad_to_head(dmu, dc, c)

    if rounds <= 1:
        res = _lbfgs(full_fun, x0, maxiter, gtol)
        mu, c = _head_to_muc(res.x, d)
        return mu, c, res

    x = x0.copy()
    res = None
    for _ in range(rounds):
        def mu_fun(mu_part, x=x):
            val, g = full_fun(np.concatenate([mu_part, x[d:]]))
            return val, g[:d]

        res_mu = _lbfgs(mu_fun, x[:d], maxiter, gtol)
        x = np.concatenate([res_mu.x, x[d:]])

        def c_fun(c_part, x=x):
            val, g = full_fun(np.concatenate([x[:d], c_part]))
            return val / c_scale, g[d:] / c_scale

        res_c = _lbfgs(c_fun, x[d:], maxiter, gtol)
        x = np.concatenate([x[:d], res_c.x])
        res = res_c
    mu, c = _head_to_muc(x, d)
    return mu, c, res


def minimize_theta_direct(cfg: ThetaLossConfig, mu0=None, c0=None,
                          maxiter=2000, rounds=3):
    """Minimize the perturbation loss directly, starting at the prior."""
    mu0 = cfg.prior.mean if mu0 is None else mu0
    c0 = cfg.prior.cov.chol if c0 is None else c0

    def vg(mu, c):
        dmu, dc = grad_loss_theta(mu, c, cfg)
        val, _ = loss_theta(mu, c, cfg)
        return val, dmu, dc

    return minimize_direct(vg, mu0, c0, maxiter=maxiter,
                           c_scale=cfg.theta**2, rounds=rounds)


def minimize_alpha_affine_direct(cfg: AlphaLossConfig, mu0=None, c0=None, maxiter=2000):
    """Minimize the affine-exact divergence-bound loss directly."""
    mu0 = cfg.prior.mean if mu0 is None else mu0
    c0 = cfg.prior.cov.chol if c0 is None else c0

    def vg(mu, c):
        val = loss_alpha_affine(mu, c, cfg)
        dmu, dc = grad_loss_alpha_affine(mu, c, cfg)
        return val, dmu, dc

    return minimize_direct(vg, mu0, c0, maxiter=maxiter)


# ---------------------------------------------------------------------------
# training


@dataclass
class OptConfig:
    epochs: int = 1000
    lr: float = 1e-3
    seed: int = 0
    batch_size: int | None = None  # None = full batch
    divergence_patience: int = 3


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_seconds: float
    forward_calls: int

    CSV_HEADER = "epoch,train_loss,val_loss,wall_seconds,forward_calls_cumulative"

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.train_loss:.10e},{self.val_loss:.10e},"
                f"{self.wall_seconds:.3f},{self.forward_calls}")


def train_val_split(n: int) -> tuple[slice, slice]:
    """First floor(9n/10) samples train, the rest validate."""
    n_train = (9 * n) // 10
    return slice(0, n_train), slice(n_train, n)


def train_decoder(
    spec: nnet.MLPSpec,
    inputs: np.ndarray,
    targets: np.ndarray,
    opt: OptConfig,
) -> tuple[nnet.MLPParams, list[EpochRecord]]:
    """Fit a surrogate network to (input, clean observation) pairs by MSE."""
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    tr, va = train_val_split(inputs.shape[0])
    x_tr, t_tr = inputs[tr], targets[tr]
    x_va, t_va = inputs[va], targets[va]
    params = nnet.init_params(spec, opt.seed)
    state = nnet.AdamState.zeros_like(params, lr=opt.lr)
    history: list[EpochRecord] = []
    bad_streak = 0
    t0 = time.perf_counter()
    n_tr = x_tr.shape[0]
    bs = opt.batch_size or n_tr
    for epoch in range(opt.epochs):
        train_loss = 0.0
        for lo in range(0, n_tr, bs):
            xb, tb = x_tr[lo : lo + bs], t_tr[lo : lo + bs]
            y, tape = nnet.forward(params, xb)
            resid = y - tb
            loss = float(np.mean(resid * resid))
            cot = (2.0 / resid.size) * resid
            grads, _ = nnet.backward(params, tape, cot)
            params, state = nnet.adam_step(params, grads, state)
            train_loss += loss * xb.shape[0] / n_tr
        if not np.isfinite(train_loss):
            bad_streak += 1
            if bad_streak >= opt.divergence_patience:
                raise DivergenceDetected(f"decoder loss non-finite at epoch {epoch}")
        else:
            bad_streak = 0
        yv, _ = nnet.forward(params, x_va)
        val_loss = float(np.mean((yv - t_va) ** 2)) if x_va.size else float("nan")
        history.append(EpochRecord(epoch, train_loss, val_loss,
                                   time.perf_counter() - t0, 0))
    return params, history


def decoder_error_stats(
    decoder: ForwardModel | nnet.MLPParams,
    forward: ForwardModel,
    test_params: np.ndarray,
) -> DecoderErrorModel:
    """Sample mean/covariance of forward-minus-decoder residuals."""
    test_params = np.asarray(test_params, dtype=float)
    targets = forward.eval_many(test_params)
    if isinstance(decoder, nnet.MLPParams):
        decoder = MLPModel(decoder)
    preds = decoder.eval_many(test_params)
    return decoder_error_stats_from_pairs(preds, targets)


def decoder_error_stats_from_pairs(preds, targets) -> DecoderErrorModel:
    """Residual statistics when the reference outputs are already in hand."""
    preds = np.asarray(preds, dtype=float)
    targets = np.asarray(targets, dtype=float)
    m, o = targets.shape
    if m < o + 1:
        raise InsufficientSamples(f"need at least O+1={o + 1} samples, got {m}")
    resid = targets - preds
    mu = resid.mean(axis=0)
    x = resid - mu
    gamma = x.T @ x / (m - 1)
    gamma = 0.5 * (gamma + gamma.T)
    try:
        spd = SPDMatrix(gamma)
    except Exception:
        spd = SPDMatrix(gamma + 1e-12 * np.eye(o))
    return DecoderErrorModel(mu_dec=mu, gamma_dec=spd)


# -- batched loss/grad over a training set ----------------------------------


def _rows_tri_solve(le: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Apply L^-1 to the last axis of ``rows`` (any leading shape)."""
    shape = rows.shape
    z = solve_triangular(le, rows.reshape(-1, shape[-1]).T, lower=True)
    return z.T.reshape(shape)


def _rows_spd_solve(spd: SPDMatrix, rows: np.ndarray) -> np.ndarray:
    """Apply G^-1 to the last axis of ``rows``."""
    shape = rows.shape
    z = spd.solve(rows.reshape(-1, shape[-1]).T)
    return z.T.reshape(shape)


def _batched_trace_terms(mus, cs, prior: GaussianModel, theta: float):
    """Prior and trace terms (values and gradients), batched over samples.

    mus: (B, D); cs: (B, D, D) lower-triangular with positive diagonal.
    Returns (values (B,), dmu (B, D), dC (B, D, D)).
    """
    lpr = prior.cov.chol
    lpr_inv = solve_triangular(lpr, np.eye(lpr.shape[0]), lower=True)
    th2 = theta * theta
    c_inv = np.linalg.inv(cs)
    s = c_inv @ lpr  # (B, D, D)
    t = lpr_inv @ cs
    z = (mus - prior.mean) @ lpr_inv.T
    vals = (
        th2 * np.sum(s * s, axis=(1, 2))
        + np.sum(z * z, axis=1)
        + th2 * np.sum(t * t, axis=(1, 2))
    )
    dmu = 2.0 * z @ lpr_inv
    c_inv_t = np.transpose(c_inv, (0, 2, 1))
    dc = -2.0 * th2 * c_inv_t @ s @ np.transpose(s, (0, 2, 1))
    dc += 2.0 * th2 * lpr_inv.T @ t
    return vals, dmu, dc


def theta_batch_value_grad(
    mus: np.ndarray,
    cs: np.ndarray,
    y_rows: np.ndarray,
    forward: ForwardModel,
    prior: GaussianModel,
    noise: GaussianModel,
    theta: float,
    with_grad: bool = True,
):
    """Per-sample perturbation losses and gradients over a batch.

    One stacked forward evaluation covers all B(D+1) points; gradients
    come back through one batched VJP. Returns
    (values (B,), dmu (B, D), dC (B, D, D), forward calls); the gradient
    arrays are None when ``with_grad`` is false.
    """
    b, d = mus.shape
    vals, dmu, dc = _batched_trace_terms(mus, cs, prior, theta)
    pts = np.empty((b, d + 1, d))
    pts[:, 0, :] = mus
    pts[:, 1:, :] = mus[:, None, :] + theta * np.transpose(cs, (0, 2, 1))
    flat = pts.reshape(b * (d + 1), d)
    before = forward.call_count
    ys = forward.eval_many(flat).reshape(b, d + 1, forward.O)
    calls = forward.call_count - before
    f0 = ys[:, 0, :]
    diffs = ys[:, 1:, :] - f0[:, None, :]  # (B, D, O)
    le = noise.cov.chol
    r = y_rows - noise.mean - f0
    zr = _rows_tri_solve(le, r)
    zd = _rows_tri_solve(le, diffs)
    vals = vals + np.sum(zr * zr, axis=1) + np.sum(zd * zd, axis=(1, 2))
    if not with_grad:
        return vals, None, None, calls
    v = _rows_spd_solve(noise.cov, r)  # (B, O)
    w = _rows_spd_solve(noise.cov, diffs)  # (B, D, O)
    cots = np.empty((b, d + 1, forward.O))
    cots[:, 0, :] = -2.0 * v - 2.0 * w.sum(axis=1)
    cots[:, 1:, :] = 2.0 * w
    g = forward.vjp_many(flat, cots.reshape(-1, forward.O)).reshape(b, d + 1, d)
    dmu = dmu + g.sum(axis=1)
    dc = dc + theta * np.transpose(g[:, 1:, :], (0, 2, 1))
    return vals, dmu, np.tril(dc), calls


def _alpha_prior_terms(mus, cs, prior: GaussianModel, alpha: float):
    """Batched first two lines of the divergence-bound loss with gradients."""
    a = alpha
    lpr = prior.cov.chol
    lpr_inv = solve_triangular(lpr, np.eye(lpr.shape[0]), lower=True)
    c_inv = np.linalg.inv(cs)
    c_inv_t = np.transpose(c_inv, (0, 2, 1))
    v = mus - prior.mean
    zc = np.einsum("bij,bj->bi", c_inv, v)
    q = np.einsum("bij,bj->bi", c_inv_t, zc)  # G^-1 v
    s = c_inv @ lpr
    t = lpr_inv @ cs
    z = v @ lpr_inv.T
    vals = (1 - a) * (np.sum(zc * zc, axis=1) + np.sum(s * s, axis=(1, 2)))
    vals += a * (np.sum(z * z, axis=1) + np.sum(t * t, axis=(1, 2)))
    dmu = 2.0 * (1 - a) * q + 2.0 * a * (z @ lpr_inv)
    dc = (1 - a) * (
        -2.0 * np.einsum("bi,bj->bij", q, zc)
        - 2.0 * c_inv_t @ s @ np.transpose(s, (0, 2, 1))
    )
    dc += 2.0 * a * (lpr_inv.T @ t)
    return vals, dmu, dc


def alpha_batch_value_grad(
    mus: np.ndarray,
    cs: np.ndarray,
    y_rows: np.ndarray,
    forward: ForwardModel,
    prior: GaussianModel,
    noise: GaussianModel,
    alpha: float,
    eps: np.ndarray,
    with_grad: bool = True,
    max_rows: int = 1 << 16,
):
    """Per-sample divergence-bound losses and gradients over a batch.

    ``eps`` (K, D) is one block of standard-normal draws shared by all
    samples in the batch (redrawn by the caller every optimizer step).
    Work is chunked so no intermediate exceeds ``max_rows`` rows.
    """
    b, d = mus.shape
    k = eps.shape[0]
    vals, dmu, dc = _alpha_prior_terms(mus, cs, prior, alpha)
    calls = 0
    le = noise.cov.chol
    chunk = max(1, max_rows // k)
    for lo in range(0, b, chunk):
        hi = min(b, lo + chunk)
        ct = np.transpose(cs[lo:hi], (0, 2, 1))
        u = mus[lo:hi, None, :] + np.matmul(eps[None, :, :], ct)  # (bc, K, D)
        flat = u.reshape(-1, d)
        before = forward.call_count
        ys = forward.eval_many(flat).reshape(hi - lo, k, forward.O)
        calls += forward.call_count - before
        r = y_rows[lo:hi, None, :] - noise.mean - ys
        zr = _rows_tri_solve(le, r)
        vals[lo:hi] += (alpha / k) * np.sum(zr * zr, axis=(1, 2))
        if not with_grad:
            continue
        w = _rows_spd_solve(noise.cov, r)
        cot = (-2.0 * alpha / k) * w
        g = forward.vjp_many(flat, cot.reshape(-1, forward.O)).reshape(hi - lo, k, d)
        dmu[lo:hi] += g.sum(axis=1)
        dc[lo:hi] += np.einsum("bkd,ke->bde", g, eps)
    if not with_grad:
        return vals, None, None, calls
    return vals, dmu, np.tril(dc), calls


# -- encoder training --------------------------------------------------------


@dataclass
class EncoderTrainConfig:
    """Which loss trains the encoder, and its knobs."""

    loss: str = "theta"  # "theta" or "alpha"
    theta: float = DEFAULT_THETA
    alpha: float = 0.5
    k_samples: int = 4096
    sampling_seed: int = 0

    def __post_init__(self):
        if self.loss not in ("theta", "alpha"):
            raise ValueError(f"unknown loss {self.loss!r}")


def train_encoder(
    spec: nnet.MLPSpec,
    y_rows: np.ndarray,
    forward: ForwardModel,
    prior: GaussianModel,
    noise: GaussianModel,
    cfg: EncoderTrainConfig,
    opt: OptConfig,
) -> tuple[nnet.MLPParams, list[EpochRecord]]:
    """Fit the encoder by minimizing the mean loss over the training split.

    ``y_rows`` are (noisy, normalized-scale) observations; ``forward``,
    ``prior`` and ``noise`` live in the same scale. The decoder (or known
    map) stays fixed for the whole run. Initialization reproduces the
    prior at every input.
    """
    y_rows = np.asarray(y_rows, dtype=float)
    d = prior.dim
    if spec.output_dim != nnet.head_dim(d):
        raise DimensionMismatch("encoder output does not match head size")
    tr, va = train_val_split(y_rows.shape[0])
    y_tr, y_va = y_rows[tr], y_rows[va]
    params = nnet.init_encoder(spec, prior.mean, prior.cov.chol, opt.seed)
    state = nnet.AdamState.zeros_like(params, lr=opt.lr)
    eps_stream = (
        SobolStream(d, skip=1 + cfg.sampling_seed) if cfg.loss == "alpha" else None
    )
    history: list[EpochRecord] = []
    bad_streak = 0
    t0 = time.perf_counter()
    calls0 = forward.call_count

    def batch_losses(ys, mus, cs, eps, with_grad):
        if cfg.loss == "theta":
            return theta_batch_value_grad(
                mus, cs, ys, forward, prior, noise, cfg.theta, with_grad
            )
        return alpha_batch_value_grad(
            mus, cs, ys, forward, prior, noise, cfg.alpha, eps, with_grad
        )

    n_tr = y_tr.shape[0]
    for epoch in range(opt.epochs):
        eps = ndtri(eps_stream.take(cfg.k_samples)) if eps_stream is not None else None
        raw, tape = nnet.forward(params, y_tr)
        out = nnet.decode_head(raw, d)
        vals, dmu, dc, _ = batch_losses(y_tr, out.mu, out.C, eps, True)
        train_loss = float(vals.mean())
        cot = nnet.head_cotangent(out, dmu, dc) / n_tr
        grads, _ = nnet.backward(params, tape, cot)
        params, state = nnet.adam_step(params, grads, state)
        if not np.isfinite(train_loss):
            bad_streak += 1
            if bad_streak >= opt.divergence_patience:
                raise DivergenceDetected(f"encoder loss non-finite at epoch {epoch}")
        else:
            bad_streak = 0
        if y_va.shape[0]:
            raw_v, _ = nnet.forward(params, y_va)
            out_v = nnet.decode_head(raw_v, d)
            vals_v, _, _, _ = batch_losses(y_va, out_v.mu, out_v.C, eps, False)
            val_loss = float(vals_v.mean())
        else:
            val_loss = float("nan")
        history.append(
            EpochRecord(epoch, train_loss, val_loss,
                        time.perf_counter() - t0, forward.call_count - calls0)
        )
    return params, history

