"""Kernel selection: the compiled extension when importable, else pure Python.

Set ``CHATNCT_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

if os.environ.get("CHATNCT_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = "python" if _impl is _kernels_py else "compiled"

edit_distance = _impl.edit_distance
shift_search = _impl.shift_search
exact_shift_search = _impl.exact_shift_search
