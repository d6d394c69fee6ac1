# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: semigroup scans and blockwise iterated sums."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def semigroup_scan(double[:, ::1] G, double[::1] decay, double[::1] init, bint reverse=False):
    """Run ``out[k+1] = decay * out[k] + G[k]`` (or its time reversal).

    With ``reverse`` the recursion is ``out[k] = decay * out[k+1] + G[k]``
    anchored at ``out[M] = init``.
    """
    cdef Py_ssize_t M = G.shape[0]
    cdef Py_ssize_t P = G.shape[1]
    cdef Py_ssize_t k, p
    out_arr = np.empty((M + 1, P), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    if G.shape[1] != decay.shape[0] or init.shape[0] != P:
        raise ValueError("shape mismatch in semigroup_scan")
    if not reverse:
        for p in range(P):
            out[0, p] = init[p]
        for k in range(M):
            for p in range(P):
                out[k + 1, p] = decay[p] * out[k, p] + G[k, p]
    else:
        for p in range(P):
            out[M, p] = init[p]
        for k in range(M - 1, -1, -1):
            for p in range(P):
                out[k, p] = decay[p] * out[k + 1, p] + G[k, p]
    return out_arr


def block_areas(double[:, ::1] inc, Py_ssize_t ratio, double weight):
    """Blockwise level-one and level-two sums of a fine increment array.

    Each block of ``ratio`` consecutive fine increments is collapsed to
    its total increment and the iterated sum
    ``sum_k (x_k - x_start + weight * dx_k)^i dx_k^j``.
    ``weight = 0`` is the left-point sum, ``weight = 0.5`` the trapezoid.
    """
    cdef Py_ssize_t Mf = inc.shape[0]
    cdef Py_ssize_t d = inc.shape[1]
    if ratio <= 0 or Mf % ratio != 0:
        raise ValueError("ratio must divide the number of fine increments")
    cdef Py_ssize_t Mc = Mf // ratio
    cdef Py_ssize_t c, k, i, j, row
    tot_arr = np.zeros((Mc, d), dtype=np.float64)
    area_arr = np.zeros((Mc, d, d), dtype=np.float64)
    cdef double[:, ::1] tot = tot_arr
    cdef double[:, :, ::1] area = area_arr
    cdef double[::1] acc = np.zeros(d, dtype=np.float64)
    for c in range(Mc):
        for i in range(d):
            acc[i] = 0.0
        for k in range(ratio):
            row = c * ratio + k
            for i in range(d):
                for j in range(d):
                    area[c, i, j] += (acc[i] + weight * inc[row, i]) * inc[row, j]
            for i in range(d):
                acc[i] += inc[row, i]
        for i in range(d):
            tot[c, i] = acc[i]
    return tot_arr, area_arr


def linear_propagate(double[:, :, ::1] A, double[:, ::1] C, double[:, ::1] init, bint reverse=False):
    """Run ``x[k+1] = A[k] @ x[k] + C[k, :, None]`` for a block of columns.

    ``A`` has shape ``(M, n, n)``, ``C`` ``(M, n)`` and ``init`` ``(n, B)``.
    With ``reverse`` the recursion is ``x[k] = A[k] @ x[k+1] + C[k]``
    anchored at ``x[M] = init``.  Returns ``(M+1, n, B)``.
    """
    cdef Py_ssize_t M = A.shape[0]
    cdef Py_ssize_t n = A.shape[1]
    cdef Py_ssize_t B = init.shape[1]
    cdef Py_ssize_t k, a, b, c, c2, src, dst
    cdef double acc
    if A.shape[2] != n or C.shape[0] != M or C.shape[1] != n or init.shape[0] != n:
        raise ValueError("shape mismatch in linear_propagate")
    out_arr = np.empty((M + 1, n, B), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    dst = M if reverse else 0
    for a in range(n):
        for b in range(B):
            out[dst, a, b] = init[a, b]
    for c in range(M):
        if reverse:
            k = M - 1 - c
            src = k + 1
            dst = k
        else:
            k = c
            src = k
            dst = k + 1
        for a in range(n):
            for b in range(B):
                acc = C[k, a]
                for c2 in range(n):
                    acc = acc + A[k, a, c2] * out[src, c2, b]
                out[dst, a, b] = acc
    return out_arr
