"""Numba switch.

Hot kernels come in two flavours: an ``@njit`` loop version and a vectorised
numpy version. ``USE_NUMBA`` picks the one the public dispatchers call. Set
``CTXGRAPH_DISABLE_NUMBA=1`` to force the numpy path (numba is then never
imported).
"""
from __future__ import annotations

import os

DISABLED = os.environ.get("CTXGRAPH_DISABLE_NUMBA", "").strip().lower() not in ("", "0", "false", "no")

HAVE_NUMBA = False
if not DISABLED:
    try:
        import numba  # noqa: F401

        HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - numba is a declared dependency
        HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not DISABLED


def njit(*args, **kwargs):
    """``numba.njit(cache=True)`` when numba is active, otherwise identity.

    The identity branch keeps the loop kernels importable (and callable, slowly)
    so the two paths can still be compared in tests.
    """
    if HAVE_NUMBA:
        import numba

        kwargs.setdefault("cache", True)
        return numba.njit(*args, **kwargs)
    if args and callable(args[0]) and len(args) == 1 and not kwargs:
        return args[0]
    return lambda fn: fn


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
