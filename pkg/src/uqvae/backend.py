"""Kernel backend selection: numba-jitted loops or pure-numpy fallback.

The hot inner loops (0D circulation time stepping) exist in two
implementations with identical semantics:

* ``numba`` - scalar loops compiled with ``@njit``, parallel over batch
  entries. Default whenever numba imports.
* ``numpy`` - vectorized over the batch dimension, no compilation.

Set ``UQVAE_BACKEND=numpy`` (or ``numba``) in the environment to force a
backend; anything else falls back to auto-detection. ``benchmarks/``
contains a script comparing the two.
"""

from __future__ import annotations

import os

try:
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised via UQVAE_BACKEND=numpy
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f

    prange = range

_ENV_VAR = "UQVAE_BACKEND"


def selected_backend() -> str:
    """Return the active backend name, ``"numba"`` or ``"numpy"``."""
    forced = os.environ.get(_ENV_VAR, "").strip().lower()
    if forced == "numpy":
        return "numpy"
    if forced == "numba":
        if not HAS_NUMBA:
            raise ImportError(f"{_ENV_VAR}=numba but numba is not importable")
        return "numba"
    return "numba" if HAS_NUMBA else "numpy"


def use_numba() -> bool:
    return selected_backend() == "numba"
