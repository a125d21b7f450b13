"""Numeric kernel backend selection.

The compiled extension is used when it imported cleanly; setting
PATCHGMM_PURE_PYTHON to anything but "" or "0" forces the NumPy fallback.
Both backends expose the same three functions with identical semantics:
estep_batch, mstep_moments, mstep_sigma2.
"""

import os

_force = os.environ.get("PATCHGMM_PURE_PYTHON", "").strip()
if _force not in ("", "0"):
    from . import _kernels_py as _impl
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as _impl
        BACKEND = "python"

estep_batch = _impl.estep_batch
mstep_moments = _impl.mstep_moments
mstep_sigma2 = _impl.mstep_sigma2

__all__ = ["BACKEND", "estep_batch", "mstep_moments", "mstep_sigma2"]
