"""Loop-heavy kernels with a compiled fast path.

The Cython module is used when it was built and ``CELLTISSUE_PURE_PYTHON``
is unset; otherwise the numpy/Python fallback is selected.  ``BACKEND``
names the active one.
"""
import os

from . import _fallback

fallback = _fallback

try:
    if os.environ.get("CELLTISSUE_PURE_PYTHON"):
        raise ImportError("pure-python backend requested")
    from . import _ckernels as compiled
except ImportError:
    compiled = None

_active = compiled if compiled is not None else _fallback
BACKEND = "cython" if compiled is not None else "python"

greedy_nms = _active.greedy_nms
greedy_match = _active.greedy_match
rasterize_disks = _active.rasterize_disks

__all__ = ["BACKEND", "compiled", "fallback", "greedy_nms", "greedy_match", "rasterize_disks"]
