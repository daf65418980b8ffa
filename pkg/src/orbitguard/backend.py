"""Numerics backend selection.

All hot kernels in :mod:`orbitguard._kernels` are decorated with
:func:`njit` from this module.  With numba importable and jitting not
disabled, that is ``numba.njit(cache=True)``; otherwise it degrades to an
identity decorator and the kernels run as plain numpy/Python.  Both paths
execute the same source, and the kernels are written so that the source
pins the arithmetic: fastmath stays off, scalar transcendentals come from
:mod:`math` (which both backends resolve to the C library; numpy's own
scalar routines differ from it by 1 ulp on a fair fraction of inputs),
and the small dense solves are explicit fixed-order loops instead of
BLAS calls.  Telemetry is therefore byte-identical across backends.

Set ``ORBITGUARD_NO_JIT=1`` before import to force the numpy fallback.
"""

from __future__ import annotations

import os

try:
    import numba as _numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    _numba = None


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


JIT_DISABLED = _flag("ORBITGUARD_NO_JIT")
USING_NUMBA = (_numba is not None) and not JIT_DISABLED


def njit(*args, **kwargs):
    """numba.njit(cache=True) or an identity decorator, per backend."""
    if USING_NUMBA:
        kwargs.setdefault("cache", True)
        return _numba.njit(*args, **kwargs)
    if args and callable(args[0]):
        return args[0]

    def wrap(func):
        return func

    return wrap


def backend_name() -> str:
    return "numba" if USING_NUMBA else "numpy"
