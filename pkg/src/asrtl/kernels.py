"""Kernel backend selection.

The compiled extension is used when it imports; setting ASRTL_PURE_PYTHON=1
forces the numpy fallback.
"""

import os

from . import _kernels_py

if os.environ.get("ASRTL_PURE_PYTHON"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

forced_viterbi = _impl.forced_viterbi
edit_ops = _impl.edit_ops
token_pass = _impl.token_pass

NEG_INF = _kernels_py.NEG_INF
