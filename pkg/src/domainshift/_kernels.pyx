# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scoring loops. Must stay bit-identical to ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def score_bits(const unsigned char[:, ::1] bits, const double[:, ::1] table):
    """Max over prefix lengths of ``table[K, B(K)]`` for each row of a 0/1 matrix."""
    cdef Py_ssize_t n = bits.shape[0]
    cdef Py_ssize_t kmax = bits.shape[1]
    cdef Py_ssize_t i, k
    cdef int b, best_k
    cdef double v, best
    values_arr = np.zeros(n, dtype=np.float64)
    argmax_arr = np.zeros(n, dtype=np.int32)
    cdef double[::1] values = values_arr
    cdef int[::1] argmax = argmax_arr
    with nogil:
        for i in range(n):
            b = 0
            best = -1.0
            best_k = 0
            for k in range(kmax):
                b += bits[i, k]
                v = table[k + 1, b]
                if v > best:
                    best = v
                    best_k = <int>(k + 1)
            if best_k > 0:
                values[i] = best
                argmax[i] = best_k
    return values_arr, argmax_arr


def score_neighbor_rows(
    const int[:, ::1] nbrs,
    const long long[::1] rows,
    const unsigned char[::1] active,
    const unsigned char[::1] is_test,
    const double[:, ::1] table,
    int k_max,
):
    """Score table rows, reading only currently active neighbours (``-1`` pads)."""
    cdef Py_ssize_t n = rows.shape[0]
    cdef Py_ssize_t width = nbrs.shape[1]
    cdef Py_ssize_t i, c
    cdef long long r
    cdef int j, rank, b, best_k
    cdef double v, best
    values_arr = np.zeros(n, dtype=np.float64)
    argmax_arr = np.zeros(n, dtype=np.int32)
    used_arr = np.zeros(n, dtype=np.int32)
    cdef double[::1] values = values_arr
    cdef int[::1] argmax = argmax_arr
    cdef int[::1] used = used_arr
    with nogil:
        for i in range(n):
            r = rows[i]
            rank = 0
            b = 0
            best = -1.0
            best_k = 0
            for c in range(width):
                j = nbrs[r, c]
                if j < 0:
                    break
                if not active[j]:
                    continue
                rank += 1
                b += is_test[j]
                v = table[rank, b]
                if v > best:
                    best = v
                    best_k = rank
                if rank == k_max:
                    break
            used[i] = rank
            if best_k > 0:
                values[i] = best
                argmax[i] = best_k
    return values_arr, argmax_arr, used_arr
