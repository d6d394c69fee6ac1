"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np


def semigroup_scan(G, decay, init, reverse=False):
    G = np.ascontiguousarray(G, dtype=np.float64)
    decay = np.asarray(decay, dtype=np.float64)
    M, P = G.shape
    if decay.shape != (P,) or np.shape(init) != (P,):
        raise ValueError("shape mismatch in semigroup_scan")
    out = np.empty((M + 1, P))
    if not reverse:
        out[0] = init
        for k in range(M):
            out[k + 1] = decay * out[k] + G[k]
    else:
        out[M] = init
        for k in range(M - 1, -1, -1):
            out[k] = decay * out[k + 1] + G[k]
    return out


def block_areas(inc, ratio, weight):
    inc = np.asarray(inc, dtype=np.float64)
    Mf, d = inc.shape
    if ratio <= 0 or Mf % ratio != 0:
        raise ValueError("ratio must divide the number of fine increments")
    blocks = inc.reshape(Mf // ratio, ratio, d)
    run = np.cumsum(blocks, axis=1) - blocks
    area = np.einsum("cki,ckj->cij", run + weight * blocks, blocks)
    return blocks.sum(axis=1), area


def linear_propagate(A, C, init, reverse=False):
    A = np.asarray(A, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    init = np.asarray(init, dtype=np.float64)
    M, n, _ = A.shape
    if A.shape[2] != n or C.shape != (M, n) or init.shape[0] != n:
        raise ValueError("shape mismatch in linear_propagate")
    out = np.empty((M + 1, n, init.shape[1]))
    if not reverse:
        out[0] = init
        for k in range(M):
            out[k + 1] = A[k] @ out[k] + C[k][:, None]
    else:
        out[M] = init
        for k in range(M - 1, -1, -1):
            out[k] = A[k] @ out[k + 1] + C[k][:, None]
    return out
