"""Variance-based global sensitivity analysis with total Sobol indices.

Sample-matrix construction follows the classic pick-freeze scheme (base
matrices A and B plus both families of column-swapped crosses, totalling
2N(Nu+1) rows); the total-effect estimator is Jansen's, computed from the
A rows against the A-with-column-from-B crosses. Base points come from an
unscrambled Sobol sequence over 2*Nu dimensions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .qmc import SobolStream

DEFAULT_N = 1 << 12
SELECT_THRESHOLD = 0.1


@dataclass
class GsaPlan:
    """Parameter ranges and sampling size for one analysis."""

    ranges: np.ndarray  # (Nu, 2) rows [low, high]
    n_base: int = DEFAULT_N
    names: list[str] | None = None

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=float)
        if self.ranges.ndim != 2 or self.ranges.shape[1] != 2:
            raise ValueError("ranges must be (Nu, 2)")
        if np.any(self.ranges[:, 0] >= self.ranges[:, 1]):
            raise ValueError("each range needs low < high")
        if self.names is None:
            self.names = [f"u{i}" for i in range(self.ranges.shape[0])]

    @property
    def n_params(self) -> int:
        return self.ranges.shape[0]

    @property
    def n_rows(self) -> int:
        return 2 * self.n_base * (self.n_params + 1)


@dataclass
class SobolIndices:
    """Total-effect indices, (Nu, n_outputs), with the output variances."""

    s_total: np.ndarray
    output_variance: np.ndarray
    names: list[str]
    output_names: list[str] | None = None

    def clipped(self, lo: float = -0.05, hi: float = 1.05) -> np.ndarray:
        """Display form; estimates outside the plausible band get clipped
        (stored values stay raw so regressions remain visible)."""
        out = self.s_total
        n_bad = int(np.sum((out < lo) | (out > hi)))
        if n_bad:
            warnings.warn(f"{n_bad} total-index estimates outside [{lo}, {hi}]")
        return np.clip(out, lo, hi)


def saltelli_sample(plan: GsaPlan, seed: int = 0) -> np.ndarray:
    """Evaluation matrix of 2N(Nu+1) parameter rows.

    Row order: A (N rows), B (N rows), then for each parameter i the
    cross A_B^(i) (A with column i taken from B, N rows each), then the
    mirrored crosses B_A^(i). ``seed`` offsets the Sobol stream so
    repeated analyses can use fresh points while staying deterministic.
    """
    nu, n = plan.n_params, plan.n_base
    stream = SobolStream(2 * nu, skip=1 + seed * n)
    base = stream.take(n)
    lo, width = plan.ranges[:, 0], plan.ranges[:, 1] - plan.ranges[:, 0]
    a = lo + width * base[:, :nu]
    b = lo + width * base[:, nu:]
    rows = [a, b]
    for i in range(nu):
        ab = a.copy()
        ab[:, i] = b[:, i]
        rows.append(ab)
    for i in range(nu):
        ba = b.copy()
        ba[:, i] = a[:, i]
        rows.append(ba)
    return np.vstack(rows)


def total_sobol_indices(outputs: np.ndarray, plan: GsaPlan,
                        output_names: list[str] | None = None) -> SobolIndices:
    """Jansen total-effect estimator from outputs aligned with
    :func:`saltelli_sample` row order.

    S_T(i, j) = mean((f(A)_j - f(A_B^(i))_j)^2) / (2 Var_j), with Var_j
    estimated from the pooled A and B evaluations. Outputs with zero
    variance get NaN indices and a warning.
    """
    outputs = np.asarray(outputs, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    nu, n = plan.n_params, plan.n_base
    if outputs.shape[0] != plan.n_rows:
        raise ValueError(
            f"outputs have {outputs.shape[0]} rows, plan needs {plan.n_rows}"
        )
    f_a = outputs[:n]
    f_b = outputs[n : 2 * n]
    pooled = np.vstack([f_a, f_b])
    var = pooled.var(axis=0)
    s_total = np.empty((nu, outputs.shape[1]))
    for i in range(nu):
        f_ab = outputs[(2 + i) * n : (3 + i) * n]
        s_total[i] = np.mean((f_a - f_ab) ** 2, axis=0) / 2.0
    zero = var == 0
    if np.any(zero):
        warnings.warn(
            f"{int(zero.sum())} outputs have zero variance; indices undefined"
        )
        var = np.where(zero, np.nan, var)
    s_total = s_total / var
    return SobolIndices(
        s_total=s_total,
        output_variance=np.where(np.isnan(var), 0.0, var),
        names=list(plan.names),
        output_names=output_names,
    )


def select_parameters(indices: SobolIndices, threshold: float = SELECT_THRESHOLD
                      ) -> list[int]:
    """Indices of parameters whose largest total index exceeds the threshold.

    Everything else is meant to stay fixed at its reference value.
    """
    with np.errstate(invalid="ignore"):
        peak = np.nanmax(np.where(np.isnan(indices.s_total), -np.inf, indices.s_total), axis=1)
    return [i for i in range(indices.s_total.shape[0]) if peak[i] > threshold]
