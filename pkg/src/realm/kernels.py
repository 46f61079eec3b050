"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. Set ``REALM_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"

if not os.environ.get("REALM_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
else:
    _impl = _pykernels

accumulate_windows = _impl.accumulate_windows
overlap_fractions = _impl.overlap_fractions

__all__ = ["BACKEND", "accumulate_windows", "overlap_fractions"]
