"""Backend selection for the hot kernels.

The compiled Cython module is used when it was built and imports cleanly;
otherwise the numpy implementations are used. Setting the environment
variable ``EQFPN_PURE_PYTHON=1`` forces the numpy path.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("EQFPN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

project_simplex_rows = _impl.project_simplex_rows
minkowski_orthant_step = _impl.minkowski_orthant_step
