"""Backend dispatch for the hot numeric kernels.

Set WSQA_NO_NUMBA=1 to force the pure-numpy fallbacks; otherwise the
numba-jitted versions are used when numba imports successfully. The active
backend name is exposed as ``BACKEND`` ("numba" or "numpy").
"""

import os

from . import _numpy

_flag = os.environ.get("WSQA_NO_NUMBA", "").strip().lower()
_numba_disabled = _flag not in ("", "0", "false", "no")

if _numba_disabled:
    _impl = _numpy
else:
    try:
        from . import _numba as _impl
    except ImportError:
        _impl = _numpy

BACKEND = _impl.BACKEND

rle_encode = _impl.rle_encode
rle_decode = _impl.rle_decode
intersect_count = _impl.intersect_count
gmm_em_step = _impl.gmm_em_step
gmm_log_likelihood = _impl.gmm_log_likelihood

numpy_backend = _numpy
