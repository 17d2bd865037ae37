"""Numba switch.

Hot kernels are written once as plain loops and compiled with numba unless
``NSCM_DISABLE_NUMBA`` is set to a truthy value (or numba is missing), in
which case callers fall back to the vectorized numpy implementations.
"""

from __future__ import annotations

import os

_FALSY = {"", "0", "false", "no", "off"}


def _env_disabled() -> bool:
    return os.environ.get("NSCM_DISABLE_NUMBA", "").strip().lower() not in _FALSY


try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _env_disabled()


def njit(func):
    """Compile ``func`` in nopython mode with caching; identity without numba."""
    if not HAS_NUMBA:
        return func
    return numba.njit(cache=True, fastmath=False)(func)
