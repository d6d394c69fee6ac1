"""Kernel dispatch.

The compiled extension is used when it imports; otherwise the numpy
fallback is selected.  Setting ``ROUGHSPDE_PURE_PYTHON=1`` forces the
fallback, which the benchmark and the kernel-equivalence tests rely on.
"""

from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("ROUGHSPDE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on the build
        _compiled = None
    else:
        BACKEND = "cython"
else:
    _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py

semigroup_scan = _impl.semigroup_scan
block_areas = _impl.block_areas
linear_propagate = _impl.linear_propagate

__all__ = ["BACKEND", "semigroup_scan", "block_areas", "linear_propagate"]
