"""Backend selection for the packed popcount kernels.

The compiled extension is used when it was built; ``BNF_PURE_PYTHON=1`` forces
the numpy fallback. ``BACKEND`` names the active implementation.
"""

import os

from . import _kernels_py

try:
    if os.environ.get("BNF_PURE_PYTHON"):
        raise ImportError("pure python requested")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "numpy"

packed_dot = _impl.packed_dot
packed_conv = _impl.packed_conv
