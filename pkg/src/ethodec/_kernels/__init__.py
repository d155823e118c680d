"""Hot numeric kernels with a compiled core and a NumPy fallback.

The compiled extension is preferred. Set ``ETHODEC_PURE_PYTHON=1`` before
import to force the fallback, e.g. to benchmark or to compare outputs.
"""

import os

BACKEND = "python"

if os.environ.get("ETHODEC_PURE_PYTHON", "") not in ("", "0"):
    from ._pykernels import *  # noqa: F401,F403
else:
    try:
        from ._ckernels import *  # noqa: F401,F403
        BACKEND = "cython"
    except ImportError:
        from ._pykernels import *  # noqa: F401,F403

from . import _pykernels as python_kernels  # noqa: E402

# numpy's SIMD tanh beats a scalar libm loop, so GELU stays on numpy
NUMPY_PREFERRED = ("gelu", "gelu_backward")
gelu = python_kernels.gelu
gelu_backward = python_kernels.gelu_backward

KERNEL_NAMES = (
    "softmax_rows",
    "softmax_rows_backward",
    "log_softmax_rows",
    "log_softmax_rows_backward",
    "layer_norm_rows",
    "layer_norm_rows_backward",
    "gelu",
    "gelu_backward",
    "adamw_update",
    "average_precision",
    "run_lengths",
)


def compiled_kernels():
    """Return the compiled module, or None when it was not built."""
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels
