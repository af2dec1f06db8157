"""Hot computational kernels with selectable backend.

Two implementations of the element-local tensor contractions and the ILU(0)
factorization are provided: a numba-compiled one and a pure numpy/python
fallback.  The active backend is chosen by the ``FLOWBENCH_BACKEND``
environment variable (``"numba"`` or ``"numpy"``); when unset, numba is used
if it imports, otherwise the fallback.
"""

import os

from . import numpy_backend

try:
    from . import numba_backend

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba_backend = None
    HAS_NUMBA = False

_VALID = ("numba", "numpy")


def _initial_backend() -> str:
    name = os.environ.get("FLOWBENCH_BACKEND", "").strip().lower()
    if name in _VALID:
        if name == "numba" and not HAS_NUMBA:
            raise ImportError("FLOWBENCH_BACKEND=numba but numba is not importable")
        return name
    return "numba" if HAS_NUMBA else "numpy"


_backend_name = _initial_backend()


def get_backend() -> str:
    """Return the name of the active kernel backend."""
    return _backend_name


def set_backend(name: str) -> None:
    """Select the kernel backend at runtime (overrides the env flag)."""
    if name not in _VALID:
        raise ValueError(f"unknown backend {name!r}, expected one of {_VALID}")
    if name == "numba" and not HAS_NUMBA:
        raise ValueError("numba backend requested but numba is not importable")
    global _backend_name
    _backend_name = name


def _mod(backend=None):
    name = backend or _backend_name
    return numba_backend if name == "numba" else numpy_backend


def apply_tensor_2d(x, m0, m1, backend=None):
    """Contract ``out[e,a,b] = sum_{i,j} m1[a,i] m0[b,j] x[e,i,j]``.

    ``m0`` acts along the last (xi0) axis and ``m1`` along the middle (xi1)
    axis; both contractions are applied as successive 1D transforms.
    """
    return _mod(backend).apply_tensor_2d(x, m0, m1)


def apply_tensor_3d(x, m0, m1, m2, backend=None):
    """3D analogue of :func:`apply_tensor_2d` (m2 acts on the xi2 axis)."""
    return _mod(backend).apply_tensor_3d(x, m0, m1, m2)


def ilu0_factor(indptr, indices, data, backend=None):
    """In-place ILU(0) of a square CSR matrix with sorted indices.

    Returns the index of the first row whose pivot fell below tolerance,
    or -1 on success.
    """
    return _mod(backend).ilu0_factor(indptr, indices, data)
