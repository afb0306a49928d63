"""Strip-attention video restoration on a tape-based autodiff core.

Importing this package caps BLAS/OpenMP thread pools from the
VISTRIP_THREADS environment variable (default 1, for reproducible runs).
The caps only take effect if numpy has not been imported yet in this
process; already-running pools keep their size.
"""

import os


def _cap_threads() -> None:
    n = os.environ.get("VISTRIP_THREADS", "1")
    try:
        if int(n) < 1:
            raise ValueError
    except ValueError:
        raise ValueError(
            f"VISTRIP_THREADS must be a positive integer, got {n!r}"
        ) from None
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "VECLIB_MAXIMUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ.setdefault(var, n)


_cap_threads()

from .autodiff import DiffTensor, Tape  # noqa: E402
from .vstf import read_tensor, write_tensor  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "Tape",
    "DiffTensor",
    "read_tensor",
    "write_tensor",
    "VideoRestorer",
    "__version__",
]


def __getattr__(name):
    # the estimator pulls in scikit-learn; load it only when asked for
    if name == "VideoRestorer":
        from .estimator import VideoRestorer

        return VideoRestorer
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
