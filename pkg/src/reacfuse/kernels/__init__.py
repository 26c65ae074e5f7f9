"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. ``REACFUSE_NUMBA=0`` forces the
numpy path; otherwise numba is used when it can be imported. Both backends
expose the same functions and are tested against each other.
"""

from __future__ import annotations

import importlib
import os
import warnings

from reacfuse.kernels import numpy_impl

# single-threaded kernels; the TBB layer warning is irrelevant here
warnings.filterwarnings("ignore", message="The TBB threading layer")

try:  # pragma: no cover - exercised implicitly when numba is present
    numba_impl = importlib.import_module("reacfuse.kernels.numba_impl")
except ImportError:
    numba_impl = None


def _pick():
    flag = os.environ.get("REACFUSE_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or numba_impl is None:
        return numpy_impl, "numpy"
    return numba_impl, "numba"


_impl, BACKEND = _pick()

masked_softmax = _impl.masked_softmax
softmax_backward = _impl.softmax_backward
gelu_forward = _impl.gelu_forward
gelu_backward = _impl.gelu_backward
bfs_distances = _impl.bfs_distances
mann_whitney_auc = _impl.mann_whitney_auc


class AllMaskedRow(ValueError):
    """A softmax row had no finite entry to normalise over."""


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"numpy": numpy_impl}
    if numba_impl is not None:
        out["numba"] = numba_impl
    return out
