"""Kernel backend selection.

The compiled extension ``ctformer._ckernels`` is used when it imports; the
numpy implementation in ``ctformer._pykernels`` is the fallback. Setting
``CTFORMER_PURE_PYTHON=1`` forces the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _pykernels

if os.environ.get("CTFORMER_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"


def _c(x, dtype=np.float64):
    return np.ascontiguousarray(x, dtype=dtype)


def cfc_scan_forward(xu, w_bh, w_heads, b_heads, dt, lengths, impl=None):
    impl = impl or _impl
    return impl.cfc_scan_forward(_c(xu), _c(w_bh), _c(w_heads), _c(b_heads), _c(dt),
                                 _c(lengths, np.int64))


def cfc_scan_backward(dh_out, w_bh, w_heads, dt, lengths, cache, impl=None):
    impl = impl or _impl
    return impl.cfc_scan_backward(_c(dh_out), _c(w_bh), _c(w_heads), _c(dt),
                                  _c(lengths, np.int64), cache)


def feature_deltas(timestamps, mask, lengths, impl=None):
    impl = impl or _impl
    return impl.feature_deltas(_c(timestamps), _c(mask), _c(lengths, np.int64))
