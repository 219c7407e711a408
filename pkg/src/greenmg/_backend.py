"""Compute backend selection.

The hot loops (MLMI correction sweeps and the rational activation) exist in
two implementations: numba-compiled kernels and plain numpy fallbacks.  The
numba path is used when numba imports and ``GREENMG_BACKEND`` is not set to
``numpy``.  Both implementations are always importable so they can be
compared side by side.
"""

import os

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None


def requested_backend():
    value = os.environ.get("GREENMG_BACKEND", "numba").strip().lower()
    if value not in ("numba", "numpy"):
        raise ValueError(f"GREENMG_BACKEND must be 'numba' or 'numpy', got {value!r}")
    return value


BACKEND = "numba" if (HAVE_NUMBA and requested_backend() == "numba") else "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is present, identity decorator otherwise."""
    if HAVE_NUMBA:
        return numba.njit(*args, **kwargs)

    def wrap(func):
        return func

    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]
    return wrap


def set_num_threads(count):
    """Pin numba's worker pool; a no-op without numba."""
    if HAVE_NUMBA and count:
        numba.set_num_threads(max(1, min(int(count), numba.config.NUMBA_NUM_THREADS)))
