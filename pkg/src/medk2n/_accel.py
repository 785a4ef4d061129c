"""numba toggle.

Set ``MEDK2N_DISABLE_NUMBA=1`` to force the pure-numpy kernels, e.g. when
numba is missing or when debugging a kernel under a regular Python tracer.
"""

import os


def _noop_jit(*args, **kwargs):
    if len(args) == 1 and callable(args[0]) and not kwargs:
        return args[0]

    def wrapper(f):
        return f

    return wrapper


def _want_numba():
    flag = os.environ.get("MEDK2N_DISABLE_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes", "on"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


HAVE_NUMBA = _want_numba()

if HAVE_NUMBA:
    from numba import njit
else:
    njit = _noop_jit
