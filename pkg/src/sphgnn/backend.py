"""Backend selection for the hot numeric kernels.

Two implementations exist for every hot kernel: a numba ``@njit`` version and
a vectorized pure-numpy version. The active one is picked once at import from
the ``SPHGNN_BACKEND`` environment variable:

* ``auto`` (default) -- numba if importable, else numpy
* ``numba``          -- force numba, raise if unavailable
* ``numpy``          -- force the pure-numpy path

Both paths are always importable so they can be benchmarked against each
other (see ``benchmarks/bench_backends.py``).
"""

import os

_CHOICE = os.environ.get("SPHGNN_BACKEND", "auto").lower()
if _CHOICE not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"SPHGNN_BACKEND must be one of auto|numba|numpy, got {_CHOICE!r}"
    )

NUMBA_AVAILABLE = False
if _CHOICE != "numpy":
    try:
        import numba  # noqa: F401

        NUMBA_AVAILABLE = True
    except ImportError:
        if _CHOICE == "numba":
            raise

USE_NUMBA = NUMBA_AVAILABLE and _CHOICE != "numpy"


def njit(*args, **kwargs):
    """``numba.njit`` when numba is available, identity decorator otherwise.

    Kernels decorated with this are only *called* on the numba path, but they
    must stay importable without numba installed.
    """
    if NUMBA_AVAILABLE:
        from numba import njit as _njit

        return _njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(fn):
        return fn

    return wrap


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"
