"""Numerical kernels with a compiled fast path.

The hot per-step work (row softmax, layer norm, cross entropy,
embedding-gradient scatter and the residual-adapter delta) lives behind a
small function table. At import time we pick the Cython extension when it
was built, otherwise the numpy reference implementation. Override with
``TINYPEFT_KERNELS=python`` or ``TINYPEFT_KERNELS=cython`` (the latter
raises if the extension is missing).

Both backends satisfy the same contracts; `benchmarks/bench_kernels.py`
compares their speed.
"""

import os

from . import numpy_backend

_choice = os.environ.get("TINYPEFT_KERNELS", "auto")
if _choice not in ("auto", "cython", "python"):
    raise ValueError(f"TINYPEFT_KERNELS must be auto|cython|python, got {_choice!r}")

if _choice == "python":
    _impl = numpy_backend
    BACKEND = "python"
else:
    try:
        from . import _fast as _impl
        BACKEND = "cython"
    except ImportError:
        if _choice == "cython":
            raise
        _impl = numpy_backend
        BACKEND = "python"

softmax_rows_fwd = _impl.softmax_rows_fwd
softmax_rows_bwd = _impl.softmax_rows_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
cross_entropy_fwd = _impl.cross_entropy_fwd
cross_entropy_bwd = _impl.cross_entropy_bwd
scatter_add_rows = _impl.scatter_add_rows
lowrank_delta_fwd = _impl.lowrank_delta_fwd
