"""Kernel backend selection.

The compiled Cython extension is used when it imported cleanly; otherwise
the NumPy reference implementation takes over.  Set LGC_KERNELS=numpy to
force the fallback (useful for benchmarking and for bisecting kernel
bugs), or LGC_KERNELS=compiled to require the extension.
"""

import os

from . import _numpy

_choice = os.environ.get("LGC_KERNELS", "").strip().lower()

if _choice == "numpy":
    _impl = _numpy
else:
    try:
        from . import _core as _impl
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "LGC_KERNELS=compiled but the lgc._kernels._core extension "
                "is not built; reinstall the package or unset LGC_KERNELS"
            )
        _impl = _numpy

BACKEND = _impl.BACKEND

filter_apply = _impl.filter_apply
masked_filter_apply = _impl.masked_filter_apply
lgtc_rate = _impl.lgtc_rate
lgtc_integrate = _impl.lgtc_integrate
flocking_pass = _impl.flocking_pass
