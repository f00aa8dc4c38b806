"""Switch between numba-compiled kernels and their pure-numpy twins.

Set ``RBPMMH_NUMBA=0`` in the environment (before import) to force the numpy
path. Numba is also bypassed silently when it is not installed.
"""
from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba ships with the dev environment
    numba = None

_FLAG = os.environ.get("RBPMMH_NUMBA", "1").strip().lower()

USE_NUMBA: bool = numba is not None and _FLAG not in ("0", "false", "no", "off")
HAVE_NUMBA: bool = numba is not None


def njit(func=None, **options):
    """``numba.njit`` with ``cache`` and ``nogil`` on, or a no-op without numba."""
    options.setdefault("cache", True)
    options.setdefault("nogil", True)

    def wrap(f):
        if numba is None:
            return f
        return numba.njit(**options)(f)

    if func is not None:
        return wrap(func)
    return wrap
