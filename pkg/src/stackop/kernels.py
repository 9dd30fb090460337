"""Kernel backend selection.

The compiled extension is preferred; set ``STACKOP_PURE_PYTHON=1`` to force
the numpy fallback (used by the benchmark and the backend-parity tests).
"""
import os

import numpy as np

from stackop import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("STACKOP_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from stackop import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def haar_wiener(dw, lo, mid, hi, amp):
    return _impl.haar_wiener(np.ascontiguousarray(dw, dtype=np.float64), int(lo), int(mid), int(hi), float(amp))


def hermite_chaos(xi, degrees):
    xi = np.ascontiguousarray(xi, dtype=np.float64)
    if xi.ndim == 1:
        xi = xi[:, None]
    return _impl.hermite_chaos(xi, np.asarray(degrees, dtype=np.int_))


def gram_separable(time_profiles, chaos, dt):
    return _impl.gram_separable(
        np.ascontiguousarray(time_profiles, dtype=np.float64),
        np.ascontiguousarray(chaos, dtype=np.float64),
        float(dt),
    )


def pathwise_inner(u, v, dt):
    return _impl.pathwise_inner(
        np.ascontiguousarray(u, dtype=np.float64),
        np.ascontiguousarray(v, dtype=np.float64),
        float(dt),
    )
