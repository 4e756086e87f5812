"""Backend selection for the hot kernels.

The compiled extension is used when it imports; set ``NMCDR_KERNELS=python``
to force the numpy fallback (the benchmark and the cross-backend tests do).
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("NMCDR_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

csr_spmm = _impl.csr_spmm
scatter_add_rows = _impl.scatter_add_rows
segment_softmax = _impl.segment_softmax
segment_softmax_backward = _impl.segment_softmax_backward

__all__ = [
    "BACKEND",
    "csr_spmm",
    "scatter_add_rows",
    "segment_softmax",
    "segment_softmax_backward",
]
