"""Kernel backend selection.

The Cython extension is used when it was built; set ``RADSSL_PURE_PYTHON=1``
to force the numpy fallback (the test-suite runs both).
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("RADSSL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

rasterize_blocks = _impl.rasterize_blocks
auc_pair_counts = _impl.auc_pair_counts
concordance_counts = _impl.concordance_counts
