"""Kernel backend selection.

The compiled Cython extension is preferred when importable; the numpy
fallback is always available. ``DISTILSER_PURE_PY=1`` forces the fallback
(useful for benchmarking and for debugging the compiled path).
"""

from __future__ import annotations

import os

from . import pykernels

if os.environ.get("DISTILSER_PURE_PY") == "1":
    active = pykernels
else:
    try:
        from . import _ckernels as active  # type: ignore[no-redef]
    except ImportError:
        active = pykernels

BACKEND = active.NAME


def get_backend(name: str):
    """Return a backend module by name ('python' or 'compiled')."""
    if name == "python":
        return pykernels
    if name == "compiled":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend: {name!r}")
