# Compiled nearest-codeword assignment. Accumulates in double so results are
# identical to the numpy reference backend regardless of input dtype.

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

ctypedef fused floating:
    float
    double

cdef double _INF = float("inf")


def _nearest_codeword_impl(floating[:, ::1] points, floating[:, ::1] codebook):
    cdef Py_ssize_t n_points = points.shape[0]
    cdef Py_ssize_t n_codes = codebook.shape[0]
    cdef Py_ssize_t dim = points.shape[1]
    indices = np.empty(n_points, dtype=np.int64)
    dists = np.empty(n_points, dtype=np.float64)
    cdef cnp.int64_t[::1] idx_view = indices
    cdef double[::1] dist_view = dists
    cdef Py_ssize_t b, n, j, best_idx
    cdef double acc, diff, best

    for b in range(n_points):
        best = _INF
        best_idx = 0
        for n in range(n_codes):
            acc = 0.0
            for j in range(dim):
                diff = (<double> points[b, j]) - (<double> codebook[n, j])
                acc += diff * diff
                if acc > best:
                    break
            if acc < best:
                best = acc
                best_idx = n
        idx_view[b] = best_idx
        dist_view[b] = best
    return indices, dists


def nearest_codeword(points, codebook):
    """Index of the nearest codeword per point, plus the squared distance.

    points: (B, d), codebook: (N, d), same dtype (float32 or float64).
    Ties broken toward the lowest codeword index.
    """
    return _nearest_codeword_impl(points, codebook)
