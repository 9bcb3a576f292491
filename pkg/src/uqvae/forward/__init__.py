"""Forward models behind a common evaluation contract.

A forward model maps a parameter vector of length D to an observation
vector of length O. Models expose an exact evaluation counter (every
evaluated parameter vector counts once, batched or not) because the loss
implementations assert their evaluation budgets against it.
"""

from __future__ import annotations

import threading

import numpy as np

from ..errors import DimensionMismatch, ForwardFailure
from .. import nnet

FD_STEP = 1e-5


class ForwardModel:
    """Base class: subclasses implement ``_eval_many``.

    ``jacobian_mode`` is one of ``"analytic"``, ``"finite-difference"``,
    ``"none"``; analytic subclasses override ``_jacobian`` (and optionally
    ``_vjp_many`` for cheap transpose-Jacobian products).
    """

    jacobian_mode = "finite-difference"

    def __init__(self, dim_in: int, dim_out: int, name: str = ""):
        self.D = int(dim_in)
        self.O = int(dim_out)
        self.name = name or type(self).__name__
        self._calls = 0
        self._lock = threading.Lock()

    # -- evaluation -------------------------------------------------------
    def _eval_many(self, u_rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def eval(self, u) -> np.ndarray:
        return self.eval_many(np.asarray(u, dtype=float)[None, :])[0]

    __call__ = eval

    def eval_many(self, u_rows) -> np.ndarray:
        u_rows = np.asarray(u_rows, dtype=float)
        if u_rows.ndim != 2 or u_rows.shape[1] != self.D:
            raise DimensionMismatch(
                f"{self.name}: expected rows of length {self.D}, got {u_rows.shape}"
            )
        with self._lock:
            self._calls += u_rows.shape[0]
        y = self._eval_many(u_rows)
        if y.shape != (u_rows.shape[0], self.O):
            raise ForwardFailure(
                f"{self.name}: produced shape {y.shape}, expected ({u_rows.shape[0]}, {self.O})"
            )
        return y

    # -- derivatives ------------------------------------------------------
    def jacobian(self, u) -> np.ndarray:
        """O x D Jacobian; central finite differences unless overridden."""
        u = np.asarray(u, dtype=float)
        if self.jacobian_mode == "analytic":
            return self._jacobian(u)
        h = FD_STEP
        pts = np.repeat(u[None, :], 2 * self.D, axis=0)
        for i in range(self.D):
            pts[2 * i, i] += h
            pts[2 * i + 1, i] -= h
        ys = self.eval_many(pts)
        return ((ys[0::2] - ys[1::2]) / (2 * h)).T

    def _jacobian(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @property
    def supports_vjp(self) -> bool:
        return type(self)._vjp_many is not ForwardModel._vjp_many

    def vjp_many(self, u_rows: np.ndarray, w_rows: np.ndarray) -> np.ndarray:
        """Rows of J(u_i)^T w_i for matching rows; does not count as evals."""
        u_rows = np.asarray(u_rows, dtype=float)
        w_rows = np.asarray(w_rows, dtype=float)
        if u_rows.shape[0] != w_rows.shape[0] or w_rows.shape[1] != self.O:
            raise DimensionMismatch("vjp_many: row mismatch")
        return self._vjp_many(u_rows, w_rows)

    def _vjp_many(self, u_rows: np.ndarray, w_rows: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- accounting -------------------------------------------------------
    @property
    def call_count(self) -> int:
        return self._calls

    def reset_calls(self) -> None:
        with self._lock:
            self._calls = 0


class ExpModel(ForwardModel):
    """Elementwise exponential map, O = D, analytic Jacobian diag(e^u)."""

    jacobian_mode = "analytic"
    OVERFLOW_LIMIT = 700.0

    def __init__(self, dim: int):
        super().__init__(dim, dim, name="exp")

    def _eval_many(self, u_rows):
        if np.any(u_rows > self.OVERFLOW_LIMIT):
            raise ForwardFailure(
                f"exp overflow: component exceeds {self.OVERFLOW_LIMIT}"
            )
        return np.exp(u_rows)

    def _jacobian(self, u):
        return np.diag(np.exp(u))

    def _vjp_many(self, u_rows, w_rows):
        return np.exp(u_rows) * w_rows


def exp_map(dim: int) -> ExpModel:
    return ExpModel(dim)


class AffineModel(ForwardModel):
    """F(u) = F u + f with constant Jacobian F."""

    jacobian_mode = "analytic"

    def __init__(self, f_mat, f_vec=None):
        f_mat = np.asarray(f_mat, dtype=float)
        o, d = f_mat.shape
        super().__init__(d, o, name="affine")
        self.F = f_mat
        self.f = np.zeros(o) if f_vec is None else np.asarray(f_vec, dtype=float)
        if self.f.shape != (o,):
            raise DimensionMismatch("affine offset has wrong length")

    def _eval_many(self, u_rows):
        return u_rows @ self.F.T + self.f

    def _jacobian(self, u):
        return self.F

    def _vjp_many(self, u_rows, w_rows):
        return w_rows @ self.F


class MLPModel(ForwardModel):
    """A trained network used as a forward-map surrogate (decoder)."""

    jacobian_mode = "analytic"

    def __init__(self, params: nnet.MLPParams, name: str = "decoder"):
        super().__init__(params.spec.input_dim, params.spec.output_dim, name=name)
        self.params = params

    def _eval_many(self, u_rows):
        y, _ = nnet.forward(self.params, u_rows)
        return y

    def _jacobian(self, u):
        _, tape = nnet.forward(self.params, u[None, :])
        rows = []
        for i in range(self.O):
            cot = np.zeros((1, self.O))
            cot[0, i] = 1.0
            _, dx = nnet.backward(self.params, tape, cot)
            rows.append(dx[0])
        return np.asarray(rows)

    def _vjp_many(self, u_rows, w_rows):
        _, tape = nnet.forward(self.params, u_rows)
        _, dx = nnet.backward(self.params, tape, w_rows)
        return dx


class ElementwiseAffineWrapped(ForwardModel):
    """Forward map conjugated with elementwise affine changes of scale.

    Wraps ``inner`` so that inputs arrive in a normalized parameter scale
    and outputs leave in a normalized observation scale:
        y_bar = c * inner((u_bar - b) / a) + d
    Evaluation counts delegate to the wrapper (one wrapped call = one
    inner call).
    """

    def __init__(self, inner: ForwardModel, a, b, c, d):
        super().__init__(inner.D, inner.O, name=f"{inner.name}[normalized]")
        self.inner = inner
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.c = np.asarray(c, dtype=float)
        self.d = np.asarray(d, dtype=float)
        self.jacobian_mode = inner.jacobian_mode

    def _eval_many(self, u_rows):
        x = (u_rows - self.b) / self.a
        return self.inner._eval_many(x) * self.c + self.d

    def _jacobian(self, u):
        x = (u - self.b) / self.a
        return (self.inner._jacobian(x) * self.c[:, None]) / self.a[None, :]

    @property
    def supports_vjp(self) -> bool:
        return self.inner.supports_vjp

    def _vjp_many(self, u_rows, w_rows):
        x = (u_rows - self.b) / self.a
        return self.inner._vjp_many(x, w_rows * self.c) / self.a
