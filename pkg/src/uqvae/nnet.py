"""Dense feed-forward networks with explicit reverse-mode gradients.

The computation graph here is fixed and small (affine layers + ReLU), so
gradients are hand-written rather than routed through a general autodiff
framework. ``forward`` accepts a single vector or a batch (rows =
samples); the tape it returns feeds ``backward``, which produces exact
gradients with respect to both the parameters and the inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteActivation, TapeMismatch
from .linalg import matrix_from_json, matrix_to_json


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_width", "output_dim"):
            if getattr(self, name) < (0 if name == "hidden_layers" else 1):
                raise ValueError(f"{name} must be >= 1")
        if self.activation != "relu":
            raise ValueError("only ReLU hidden activations are supported")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per affine layer, output layer last."""
        dims = [self.input_dim] + [self.hidden_width] * self.hidden_layers
        dims.append(self.output_dim)
        return list(zip(dims[:-1], dims[1:]))


@dataclass
class MLPParams:
    spec: MLPSpec
    weights: list[np.ndarray]  # weights[i] has shape (fan_out, fan_in)
    biases: list[np.ndarray]

    def n_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MLPParams":
        return MLPParams(
            self.spec,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )


def init_params(spec: MLPSpec, seed: int) -> MLPParams:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_dims:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MLPParams(spec, weights, biases)


def vec_lower(c: np.ndarray) -> np.ndarray:
    """Row-major vectorization of the strict lower triangle."""
    d = c.shape[0]
    i, j = np.tril_indices(d, k=-1)
    return c[i, j]


def unvec_lower(l_raw: np.ndarray, d: int) -> np.ndarray:
    """Inverse of :func:`vec_lower`; fills a strictly lower-triangular matrix."""
    expected = d * (d - 1) // 2
    if l_raw.shape[-1] != expected:
        raise DimensionMismatch(
            f"strict lower triangle of a {d}x{d} matrix needs {expected} entries, "
            f"got {l_raw.shape[-1]}"
        )
    out = np.zeros(l_raw.shape[:-1] + (d, d))
    i, j = np.tril_indices(d, k=-1)
    out[..., i, j] = l_raw
    return out


def head_dim(d: int) -> int:
    """Encoder output size for parameter dimension ``d``."""
    return d + d * (d + 1) // 2


@dataclass
class EncoderOutput:
    """Decoded encoder head: posterior mean and Cholesky factor."""

    mu: np.ndarray
    sigma_raw: np.ndarray
    l_raw: np.ndarray
    C: np.ndarray


def decode_head(raw: np.ndarray, d: int) -> EncoderOutput:
    """Split a raw head vector into (mu, C).

    Layout: first ``d`` entries are the mean, the next ``d`` are
    log-diagonal entries of C, the remaining ``d(d-1)/2`` fill the strict
    lower triangle of C row-major. The diagonal is exponentiated, so C is
    always a valid Cholesky factor.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape[-1] != head_dim(d):
        raise DimensionMismatch(
            f"head for D={d} needs {head_dim(d)} entries, got {raw.shape[-1]}"
        )
    mu = raw[..., :d]
    sigma_raw = raw[..., d : 2 * d]
    l_raw = raw[..., 2 * d :]
    c = unvec_lower(l_raw, d)
    idx = np.arange(d)
    c[..., idx, idx] = np.exp(sigma_raw)
    return EncoderOutput(mu=mu, sigma_raw=sigma_raw, l_raw=l_raw, C=c)


def encode_head(mu: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Inverse of :func:`decode_head` for a valid Cholesky factor."""
    d = len(mu)
    diag = np.diag(c)
    if np.any(diag <= 0):
        raise ValueError("Cholesky factor must have positive diagonal")
    return np.concatenate([mu, np.log(diag), vec_lower(c)])


def head_cotangent(out: EncoderOutput, dmu: np.ndarray, dc: np.ndarray) -> np.ndarray:
    """Pull a gradient in (mu, C) back to the raw head vector.

    The diagonal chain rule picks up a factor C_ii from the exponential.
    Batched inputs are supported (leading axes broadcast).
    """
    d = out.mu.shape[-1]
    idx = np.arange(d)
    dsigma = dc[..., idx, idx] * out.C[..., idx, idx]
    i, j = np.tril_indices(d, k=-1)
    dl = dc[..., i, j]
    return np.concatenate([dmu, dsigma, dl], axis=-1)


def forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, list]:
    """Evaluate the network; returns (output, tape).

    ``x`` may be a vector of length input_dim or a batch (n, input_dim).
    The tape records layer inputs and pre-activations for ``backward``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != params.spec.input_dim:
        raise DimensionMismatch(
            f"input dim {xb.shape[1]} != spec input_dim {params.spec.input_dim}"
        )
    n_layers = len(params.weights)
    tape = [xb]
    a = xb
    for li, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        if li < n_layers - 1:
            a = np.maximum(z, 0.0)
        else:
            a = z
        tape.append(a)
    if not np.isfinite(a).all():
        raise NonFiniteActivation("forward pass produced non-finite output")
    return (a[0] if single else a), tape


def backward(
    params: MLPParams, tape: list, dloss_dy: np.ndarray
) -> tuple[MLPParams, np.ndarray]:
    """Reverse-mode gradients of the network map.

    Returns (gradients shaped like ``params``, gradient w.r.t. inputs).
    The ReLU subgradient at exactly zero is taken as zero. For batched
    tapes the parameter gradients are summed over the batch and the input
    gradient is per-row.
    """
    dy = np.asarray(dloss_dy, dtype=float)
    single = dy.ndim == 1
    g = dy[None, :] if single else dy
    n_layers = len(params.weights)
    if len(tape) != n_layers + 1:
        raise TapeMismatch(f"tape has {len(tape)} records, expected {n_layers + 1}")
    if g.shape != tape[-1].shape:
        raise TapeMismatch(
            f"cotangent shape {g.shape} != output shape {tape[-1].shape}"
        )
    d_weights = [None] * n_layers
    d_biases = [None] * n_layers
    for li in range(n_layers - 1, -1, -1):
        a_in = tape[li]
        if li < n_layers - 1:
            # post-activation was stored; ReLU derivative from its sign
            g = g * (tape[li + 1] > 0.0)
        d_weights[li] = g.T @ a_in
        d_biases[li] = g.sum(axis=0)
        g = g @ params.weights[li]
    dx = g[0] if single else g
    return MLPParams(params.spec, d_weights, d_biases), dx


@dataclass
class AdamState:
    """Adam optimizer state for one parameter set."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MLPParams, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
            lr=lr,
            **kw,
        )


def adam_step(
    params: MLPParams, grads: MLPParams, state: AdamState
) -> tuple[MLPParams, AdamState]:
    """One Adam update with bias-corrected moments. Returns new objects."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_w, new_b = [], []
    for i, (w, gw) in enumerate(zip(params.weights, grads.weights)):
        state.m_w[i] = b1 * state.m_w[i] + (1 - b1) * gw
        state.v_w[i] = b2 * state.v_w[i] + (1 - b2) * gw * gw
        new_w.append(w - state.lr * (state.m_w[i] / c1) / (np.sqrt(state.v_w[i] / c2) + state.eps))
    for i, (b, gb) in enumerate(zip(params.biases, grads.biases)):
        state.m_b[i] = b1 * state.m_b[i] + (1 - b1) * gb
        state.v_b[i] = b2 * state.v_b[i] + (1 - b2) * gb * gb
        new_b.append(b - state.lr * (state.m_b[i] / c1) / (np.sqrt(state.v_b[i] / c2) + state.eps))
    state.step = t
    return MLPParams(params.spec, new_w, new_b), state


LAST_LAYER_SCALE = 1e-4


def init_encoder(
    spec: MLPSpec, mu_pr: np.ndarray, c_pr: np.ndarray, seed: int
) -> MLPParams:
    """Initialize an encoder so that it outputs the prior at zero input.

    Xavier-uniform everywhere, final-layer weights scaled down by 1e-4, and
    final-layer biases set to the head encoding of (mu_pr, C_pr). Any input
    then decodes to approximately the prior mean and prior Cholesky factor,
    which minimizes the prior-matching part of the training losses.
    """
    mu_pr = np.asarray(mu_pr, dtype=float)
    d = mu_pr.shape[0]
    if spec.output_dim != head_dim(d):
        raise DimensionMismatch(
            f"encoder output_dim {spec.output_dim} != head size {head_dim(d)}"
        )
    params = init_params(spec, seed)
    params.weights[-1] *= LAST_LAYER_SCALE
    params.biases[-1] = encode_head(mu_pr, np.asarray(c_pr, dtype=float))
    return params


def save_checkpoint(path, params: MLPParams, meta: dict | None = None) -> None:
    doc = {
        "format_version": 1,
        "spec": {
            "input_dim": params.spec.input_dim,
            "hidden_layers": params.spec.hidden_layers,
            "hidden_width": params.spec.hidden_width,
            "output_dim": params.spec.output_dim,
            "activation": params.spec.activation,
        },
        "layers": [
            {"W": matrix_to_json(w), "b": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
        "meta": meta or {},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[MLPParams, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    spec = MLPSpec(**doc["spec"])
    weights = [matrix_from_json(layer["W"]) for layer in doc["layers"]]
    biases = [np.asarray(layer["b"], dtype=float) for layer in doc["layers"]]
    return MLPParams(spec, weights, biases), doc.get("meta", {})
