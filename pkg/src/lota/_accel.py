"""Optional numba acceleration.

Set ``LOTA_DISABLE_NUMBA=1`` to force the pure-numpy code paths. The flag is
read once at import time.
"""

from __future__ import annotations

import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrap(f):
        return f

    return wrap


def _flag_disabled() -> bool:
    return os.environ.get("LOTA_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


def _have_numba() -> bool:
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


HAVE_NUMBA = _have_numba()
USE_NUMBA = HAVE_NUMBA and not _flag_disabled()

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit

BACKEND = "numba" if USE_NUMBA else "numpy"
