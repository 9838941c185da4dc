"""Kernel selection: compiled extension when built, numpy fallback otherwise.

Set ``DSGD_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

BACKEND = "python"
flux_contract = _kernels_py.flux_contract

if os.environ.get("DSGD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        flux_contract = _kernels.flux_contract
        BACKEND = "cython"

__all__ = ["flux_contract", "BACKEND"]
