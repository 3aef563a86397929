"""Numba switch.

Set ``NFSEG_DISABLE_NUMBA=1`` to run every hot kernel through its numpy
fallback instead of the compiled path. The flag is read once at import.
"""
import os

_FLAG = os.environ.get("NFSEG_DISABLE_NUMBA", "").strip().lower()

try:
    import numba as _nb
except ImportError:  # pragma: no cover
    _nb = None

USE_NUMBA = _nb is not None and _FLAG not in ("1", "true", "yes", "on")


def njit(*args, **kwargs):
    """``numba.njit`` with caching on, or the identity when numba is unavailable."""
    kwargs.setdefault("cache", True)
    if _nb is None:
        if args and callable(args[0]):
            return args[0]
        return lambda f: f
    return _nb.njit(*args, **kwargs)


def backend():
    return "numba" if USE_NUMBA else "numpy"
