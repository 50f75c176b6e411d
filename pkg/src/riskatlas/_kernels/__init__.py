"""Kernel backend selection: compiled extension if available, NumPy otherwise.

The environment variable RISKATLAS_KERNEL forces a backend ("cython" or
"numpy"); forcing "cython" without the compiled module is an import
error rather than a silent fallback.
"""
from __future__ import annotations

import os

from . import pyops

_forced = os.environ.get("RISKATLAS_KERNEL")

if _forced == "numpy":
    cell_indicators = pyops.cell_indicators
    BACKEND = "numpy"
elif _forced == "cython":
    from ._cellops import cell_indicators  # noqa: F401

    BACKEND = "cython"
elif _forced:
    raise ImportError(f"RISKATLAS_KERNEL must be 'cython' or 'numpy', not {_forced!r}")
else:
    try:
        from ._cellops import cell_indicators  # noqa: F401

        BACKEND = "cython"
    except ImportError:
        cell_indicators = pyops.cell_indicators
        BACKEND = "numpy"

__all__ = ["cell_indicators", "BACKEND", "pyops"]
