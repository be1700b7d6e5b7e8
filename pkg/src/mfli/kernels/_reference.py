"""Numpy fallback for the compiled assignment kernel.

Distances are accumulated in float64 exactly like the compiled core so both
backends select identical codewords, including on ties (lowest index wins).
"""

from __future__ import annotations

import numpy as np

# Cap the (chunk, N, d) temporary at roughly 32 MB of float64.
_CHUNK_BUDGET = 4_000_000

BACKEND = "reference"


def nearest_codeword(points: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest codeword per point, plus the squared distance.

    points: (B, d), codebook: (N, d). Nearest by squared Euclidean distance;
    ties broken toward the lowest codeword index.
    """
    n_points = points.shape[0]
    n_codes = codebook.shape[0]
    dim = points.shape[1]
    indices = np.empty(n_points, dtype=np.int64)
    dists = np.empty(n_points, dtype=np.float64)
    codes64 = codebook.astype(np.float64, copy=False)
    chunk = max(1, _CHUNK_BUDGET // max(1, n_codes * dim))
    for start in range(0, n_points, chunk):
        block = points[start : start + chunk].astype(np.float64, copy=False)
        d2 = ((block[:, None, :] - codes64[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        indices[start : start + chunk] = best
        dists[start : start + chunk] = d2[np.arange(block.shape[0]), best]
    return indices, dists
