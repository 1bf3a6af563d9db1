"""Numba switch.

Set ``IMVLSTM_DISABLE_NUMBA=1`` to force the pure-numpy kernels even when
numba is importable.
"""
import os

DISABLED = os.environ.get("IMVLSTM_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes", "on")

try:
    if DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]
        return lambda fn: fn
