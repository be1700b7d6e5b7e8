"""Hot-loop kernels with a compiled core and a numpy fallback.

The compiled extension is selected at import when available; set
``MFLI_PURE_PYTHON=1`` to force the numpy backend (used by the kernel
benchmark and the parity tests).
"""

from __future__ import annotations

import os

import numpy as np

from . import _reference

if os.environ.get("MFLI_PURE_PYTHON"):
    _backend = _reference
else:
    try:
        from . import _core as _backend  # type: ignore[no-redef]
    except ImportError:
        _backend = _reference

BACKEND: str = _backend.BACKEND
HAVE_COMPILED: bool = BACKEND == "compiled"


def _prepare(points: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dtype = np.float64 if points.dtype == np.float64 or codebook.dtype == np.float64 else np.float32
    pts = np.ascontiguousarray(points, dtype=dtype)
    codes = np.ascontiguousarray(codebook, dtype=dtype)
    if pts.ndim != 2 or codes.ndim != 2 or pts.shape[1] != codes.shape[1]:
        raise ValueError(f"shape mismatch: points {pts.shape} vs codebook {codes.shape}")
    if codes.shape[0] == 0:
        raise ValueError("empty codebook")
    return pts, codes


def nearest_codeword(points: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest codeword index and squared Euclidean distance per point.

    points: (B, d), codebook: (N, d). Ties break toward the lowest index.
    """
    pts, codes = _prepare(points, codebook)
    if pts.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    return _backend.nearest_codeword(pts, codes)
