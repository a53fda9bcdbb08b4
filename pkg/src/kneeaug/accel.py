"""Backend selection for the hot loops.

Set ``KNEEAUG_NUMBA=0`` to run every kernel through its pure-numpy path.
Numba is used by default when it can be imported.
"""
import os

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_flag = os.environ.get("KNEEAUG_NUMBA", "1").strip().lower()
USE_NUMBA = HAVE_NUMBA and _flag not in ("0", "false", "no", "off")


def njit(func):
    """Compile ``func`` with numba when available, otherwise return it as-is."""
    if not HAVE_NUMBA:
        return func
    return numba.njit(cache=True, nogil=True)(func)


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


def pick(numba_impl, numpy_impl):
    return numba_impl if USE_NUMBA else numpy_impl
