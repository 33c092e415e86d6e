# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for the fixed-point solvers.

Signatures and results match ``_kernels_py`` exactly (up to float rounding
in the residual sum).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport free, malloc

cnp.import_array()


def project_simplex_rows(Z):
    """Row-wise simplex projection by active-set elimination (no sort).

    The threshold ``(sum of active entries - 1) / |active|`` is recomputed
    after dropping entries at or below it, until nothing is dropped; this
    yields the same threshold as the sort-and-threshold rule.
    """
    cdef double[:, ::1] z = np.ascontiguousarray(Z, dtype=np.float64)
    cdef Py_ssize_t m = z.shape[0], n = z.shape[1]
    out = np.empty((m, n), dtype=np.float64)
    th = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] x = out
    cdef double[::1] theta = th
    cdef char* active = <char*> malloc(n * sizeof(char))
    cdef Py_ssize_t i, j, count, dropped
    cdef double total, t, v
    if active == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(m):
                total = 0.0
                for j in range(n):
                    active[j] = 1
                    total += z[i, j]
                count = n
                t = (total - 1.0) / count
                while True:
                    dropped = 0
                    for j in range(n):
                        if active[j] and z[i, j] <= t:
                            active[j] = 0
                            total -= z[i, j]
                            count -= 1
                            dropped += 1
                    if dropped == 0 or count == 0:
                        break
                    t = (total - 1.0) / count
                theta[i] = t
                for j in range(n):
                    v = z[i, j] - t
                    x[i, j] = v if v > 0 else 0.0
    finally:
        free(active)
    return out, th


def minkowski_orthant_step(Z, X, G, double alpha):
    cdef double[:, :, ::1] z = np.ascontiguousarray(Z, dtype=np.float64)
    cdef double[:, :, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef double[:, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t B = z.shape[0], K = z.shape[1], n = z.shape[2]
    out = np.empty((B, K, n), dtype=np.float64)
    res = np.zeros(B, dtype=np.float64)
    cdef double[:, :, ::1] zn = out
    cdef double[::1] r = res
    cdef Py_ssize_t b, k, e
    cdef double y, d, acc
    with nogil:
        for b in range(B):
            for k in range(K):
                acc = 0.0
                for e in range(n):
                    y = 2.0 * x[b, k, e] - z[b, k, e] - alpha * g[b, e]
                    if y < 0.0:
                        y = 0.0
                    d = y - x[b, k, e]
                    acc += d * d
                    zn[b, k, e] = z[b, k, e] + d
                r[b] += sqrt(acc)
    return out, res
