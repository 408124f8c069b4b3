"""Hot-loop kernels with a compiled core and a pure-Python fallback.

The compiled module is used when it was built and importable, unless the
environment variable ``COSMOS_PURE_PYTHON=1`` is set. ``BACKEND`` records
which one was selected.
"""

import os

import numpy as np

from . import _pykernels

_impl = _pykernels
BACKEND = "python"

if os.environ.get("COSMOS_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels


def l1_distance_matrix(stack: np.ndarray) -> np.ndarray:
    """All pairwise entrywise l1 distances for a stack of (n, M) matrices."""
    return _impl.l1_distance_matrix(np.ascontiguousarray(stack, dtype=np.float64))


def greedy_cluster(dist: np.ndarray, b0: float) -> tuple[np.ndarray, list[int]]:
    return _impl.greedy_cluster(np.ascontiguousarray(dist, dtype=np.float64), float(b0))


def argmax_rows(probs: np.ndarray) -> np.ndarray:
    """Row argmax; ties resolve to the lowest column index."""
    return _impl.argmax_rows(np.ascontiguousarray(probs, dtype=np.float64))


def top2_margin(probs: np.ndarray) -> np.ndarray:
    """Largest minus second-largest entry of every row."""
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 2:
        raise ValueError("margin needs at least two classes")
    return _impl.top2_margin(probs)
