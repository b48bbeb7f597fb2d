"""Kernel dispatch: compiled Cython core when available, numpy otherwise.

Set ``CRACKSEG_PURE_PYTHON=1`` to force the numpy path.
"""
import os

from . import _pykernels

if os.environ.get("CRACKSEG_PURE_PYTHON") == "1":
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

sweep_counts = _impl.sweep_counts
box_mean = _impl.box_mean

__all__ = ["BACKEND", "sweep_counts", "box_mean"]
