"""Backend selection for the compiled stencil kernels.

Set ``DTNLAB_DISABLE_NUMBA=1`` to force the vectorised NumPy code paths.
The flag is read once at import time.
"""

from __future__ import annotations

import os

__all__ = ["NUMBA_ENABLED", "njit", "backend_name"]

_DISABLED = os.environ.get("DTNLAB_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:  # pragma: no cover - exercised implicitly
    if _DISABLED:
        raise ImportError
    import numba as _numba

    NUMBA_ENABLED = True
except ImportError:  # pragma: no cover
    _numba = None
    NUMBA_ENABLED = False


def njit(*args, **kwargs):
    """``numba.njit`` when available and enabled, otherwise the identity decorator."""
    if NUMBA_ENABLED:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"
