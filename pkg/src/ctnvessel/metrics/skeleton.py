"""Topology-preserving 3D skeletonization (iterative simple-point thinning).

Two interchangeable backends run the same algorithm: a compiled Cython
kernel and a pure-Python fallback. The compiled one is used when it was
built; set ``CTNVESSEL_PURE_PYTHON=1`` to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _tables
from . import _thin_py

try:
    if os.environ.get("CTNVESSEL_PURE_PYTHON"):
        raise ImportError("pure-python backend forced")
    from . import _thinning as _compiled
except ImportError:
    _compiled = None

BACKENDS = ("compiled", "python") if _compiled is not None else ("python",)
DEFAULT_BACKEND = BACKENDS[0]


def _run_compiled(padded: np.ndarray) -> None:
    _compiled.thin_padded(
        padded, _tables.OFFSETS, _tables.OCTANTS, _tables.EULER_LUT,
        _tables.EULER_INVARIANT_SUM, _tables.ADJ, _tables.ADJ_COUNT, _tables.BORDERS,
    )


def skeletonize(mask: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Thin a rank-3 binary mask to a one-voxel-wide skeleton.

    Border voxels are peeled one face direction at a time; a voxel is
    removed only if it is not an endpoint and is simple (removal keeps
    both the 26-connected component structure and the Euler
    characteristic), so the output is a subset of the input with the same
    26-connected components.
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"skeletonize expects a rank-3 mask, got shape {mask.shape}")
    backend = backend or DEFAULT_BACKEND
    if backend not in BACKENDS:
        raise ValueError(f"backend {backend!r} unavailable; have {BACKENDS}")
    padded = np.pad(mask.astype(bool), 1).astype(np.uint8)
    if padded.any():
        if backend == "compiled":
            _run_compiled(padded)
        else:
            _thin_py.thin_padded(padded)
    return padded[1:-1, 1:-1, 1:-1].astype(bool)
