"""Numeric kernel dispatch.

The compiled extension is used when it imports; otherwise the pure-Python
module is used. ``MISRET_PURE=1`` forces the fallback. ``BACKEND`` names the
active implementation.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("MISRET_PURE", "") not in ("", "0"):
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        _impl = _pykernels
        BACKEND = "python"

returns_to_go = _impl.returns_to_go
expectile_fit = _impl.expectile_fit
mf_sgd = _impl.mf_sgd

__all__ = ["BACKEND", "returns_to_go", "expectile_fit", "mf_sgd"]
