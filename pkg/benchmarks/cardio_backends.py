"""Compare the circulation-model integration backends.

Runs the same batched 25-heartbeat integrations through the numba kernels
and the pure-numpy fallback, reports wall time per simulation and the
maximum discrepancy between the two. The numpy path is vectorized over
the batch, so its per-simulation cost falls with batch size while the
numba path is fast even for a single run.

Usage:
    python benchmarks/cardio_backends.py [--batches 1 8 32] [--beats 25]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from uqvae.backend import HAS_NUMBA
from uqvae.forward.cardio import DEFAULT_X0, CardioParams
from uqvae.forward.cardio_kernels import (
    _integrate_batch_numba,
    _integrate_batch_numpy,
    steps_per_beat,
)


def make_batch(n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n):
        over = {
            "HR": 75.0 * rng.uniform(0.9, 1.1),
            "EA_LV": 3.0391 * rng.uniform(0.8, 1.2),
            "R_AR_SYS": 0.588 * rng.uniform(0.8, 1.2),
        }
        rows.append(CardioParams.reference(**over).pack(0.0))
    return np.stack(rows)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--batches", type=int, nargs="+", default=[1, 8, 32])
    parser.add_argument("--beats", type=int, default=25)
    parser.add_argument("--dt", type=float, default=1e-4)
    parser.add_argument("--samples-per-beat", type=int, default=1000)
    args = parser.parse_args()

    if not HAS_NUMBA:
        print("numba not importable; only the numpy path will run")

    print(f"{'batch':>6} {'numba s/sim':>12} {'numpy s/sim':>12} "
          f"{'speedup':>8} {'max |diff|':>11}")
    for n in args.batches:
        thetas = make_batch(n)
        nps = steps_per_beat(
            float((60.0 / thetas[:, 26]).max()), args.dt, args.samples_per_beat
        )
        out_nb = t_nb = None
        if HAS_NUMBA:
            # warm the JIT outside the timed region
            _integrate_batch_numba(thetas[:1], DEFAULT_X0, nps, 1,
                                   args.samples_per_beat)
            t0 = time.perf_counter()
            out_nb, _ = _integrate_batch_numba(
                thetas, DEFAULT_X0, nps, args.beats, args.samples_per_beat
            )
            t_nb = time.perf_counter() - t0
        t0 = time.perf_counter()
        out_np, _ = _integrate_batch_numpy(
            thetas, DEFAULT_X0, nps, args.beats, args.samples_per_beat
        )
        t_np = time.perf_counter() - t0
        if out_nb is not None:
            diff = float(np.abs(out_nb - out_np).max())
            print(f"{n:6d} {t_nb / n:12.3f} {t_np / n:12.3f} "
                  f"{t_np / t_nb:8.1f} {diff:11.2e}")
        else:
            print(f"{n:6d} {'-':>12} {t_np / n:12.3f}")


if __name__ == "__main__":
    main()
