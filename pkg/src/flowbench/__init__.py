"""flowbench: matrix-free high-order finite elements and flow benchmarks."""

__version__ = "0.1.0"

from .kernels import get_backend, set_backend  # noqa: F401
