"""Numba switch.

Set ``GUI_FEDSIM_JIT=0`` to force the pure-numpy kernels. Numba is used
when importable and the flag is unset or truthy.
"""
from __future__ import annotations

import os

_FLAG = os.environ.get("GUI_FEDSIM_JIT", "1").strip().lower()

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    _numba = None

NUMBA_AVAILABLE = _numba is not None
USE_NUMBA = NUMBA_AVAILABLE and _FLAG not in ("0", "false", "no", "off")


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise."""
    if NUMBA_AVAILABLE:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]
    return lambda fn: fn
