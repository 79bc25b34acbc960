"""Selects the co-attention kernel backend at import.

The compiled extension ``gsn._ckernels`` is used when it was built;
otherwise, or when ``GSN_PURE_PYTHON=1`` is set, the numpy implementation
in ``gsn._pykernels`` is used. Both expose ``coattn_forward``,
``coattn_backward``, ``group_forward``, ``group_backward`` and
``BACKEND``.
"""
import os

from . import _pykernels

if os.environ.get("GSN_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _pykernels

coattn_forward = _impl.coattn_forward
coattn_backward = _impl.coattn_backward
group_forward = _impl.group_forward
group_backward = _impl.group_backward
BACKEND = _impl.BACKEND

python_backend = _pykernels
