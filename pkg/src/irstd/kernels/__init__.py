"""Hot array kernels with selectable backend.

The accelerated path uses numba-jitted loops; a pure-numpy fallback covers
environments without numba. Selection happens once at import time through
the ``IRSTD_BACKEND`` environment variable:

* ``IRSTD_BACKEND=numba`` - require the jitted kernels (raise if numba is missing)
* ``IRSTD_BACKEND=numpy`` - force the pure-numpy fallback
* unset / ``auto``        - numba when importable, numpy otherwise
"""

import os

_choice = os.environ.get("IRSTD_BACKEND", "auto").strip().lower() or "auto"
if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"IRSTD_BACKEND must be 'numba', 'numpy' or 'auto', got {_choice!r}"
    )

if _choice == "numpy":
    from . import numpy_ops as _impl

    _active = "numpy"
else:
    try:
        from . import numba_ops as _impl

        _active = "numba"
    except ImportError:
        if _choice == "numba":
            raise
        from . import numpy_ops as _impl

        _active = "numpy"


def active_backend():
    """Name of the kernel backend selected at import time."""
    return _active


conv3x3 = _impl.conv3x3
conv3x3_wgrad = _impl.conv3x3_wgrad
maxpool2 = _impl.maxpool2
maxpool2_grad = _impl.maxpool2_grad
upsample2 = _impl.upsample2
upsample2_grad = _impl.upsample2_grad
chan_scale_shift = _impl.chan_scale_shift
chan_combine = _impl.chan_combine
relu_fwd = _impl.relu_fwd
relu_bwd = _impl.relu_bwd
sigmoid_fwd = _impl.sigmoid_fwd
sigmoid_bwd = _impl.sigmoid_bwd
label_components = _impl.label_components
