"""Optional numba acceleration.

Hot loops (the bandit run loop, the cart-pole integrator) ship in two
flavours: an ``@njit`` kernel and a vectorised numpy implementation.  The
numba path is used when numba imports cleanly and ``LOMAQ_LAB_NUMBA`` is not
set to ``0``/``false``/``off``.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("LOMAQ_LAB_NUMBA", "1").strip().lower()
_REQUESTED = _FLAG not in ("0", "false", "off", "no")

try:  # pragma: no cover - exercised implicitly depending on environment
    import numba as _numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _numba = None
    HAVE_NUMBA = False


def numba_enabled() -> bool:
    """Whether the numba kernels are active for this process."""
    return HAVE_NUMBA and _REQUESTED


def njit(*args, **kwargs):
    """``numba.njit`` when available, identity decorator otherwise.

    Kernels wrapped with this still run (slowly) without numba, which keeps
    the equivalence tests meaningful on machines lacking it.
    """
    kwargs.setdefault("cache", True)
    if HAVE_NUMBA:
        return _numba.njit(*args, **kwargs)
    if len(args) == 1 and callable(args[0]):
        return args[0]
    return lambda fn: fn
