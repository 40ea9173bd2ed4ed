"""Optional numba acceleration.

Setting ``OBJNOVELTY_DISABLE_NUMBA=1`` (or running without numba installed)
makes :func:`njit` a no-op, so every kernel executes as plain numpy/Python.
"""

import os

_DISABLED = os.environ.get("OBJNOVELTY_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}

try:
    if _DISABLED:
        raise ImportError
    import numba as _numba
except ImportError:
    _numba = None

NUMBA_ENABLED = _numba is not None


def njit(*args, **kwargs):
    """``numba.njit`` when acceleration is on, identity decorator otherwise."""
    if NUMBA_ENABLED:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return lambda fn: fn
