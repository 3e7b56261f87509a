# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: the selective-state recurrence and fused 4-bit matmul."""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def ssm_scan(floating[:, :, ::1] a,
             floating[:, :, :, ::1] Bm,
             floating[:, :, :, ::1] Cm,
             floating[:, :, :, ::1] X,
             floating[::1] D,
             floating[:, :, :, ::1] S):
    """Run ``S <- a S + B x^T ; y = C^T S + D x`` over every timestep.

    Shapes: a (b, t, h), Bm/Cm (b, t, h, n), X (b, t, h, p), D (h,),
    S (b, h, n, p). S is updated in place; returns y (b, t, h, p).
    """
    cdef Py_ssize_t nb = X.shape[0], nt = X.shape[1], nh = X.shape[2], npp = X.shape[3]
    cdef Py_ssize_t nn = Bm.shape[3]
    cdef Py_ssize_t b, t, h, n, p
    cdef floating at, bn, cn, acc, xp
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((nb, nt, nh, npp), dtype=dtype)
    cdef floating[:, :, :, ::1] Y = out
    with nogil:
        for b in range(nb):
            for t in range(nt):
                for h in range(nh):
                    at = a[b, t, h]
                    for n in range(nn):
                        bn = Bm[b, t, h, n]
                        for p in range(npp):
                            S[b, h, n, p] = at * S[b, h, n, p] + bn * X[b, t, h, p]
                    for p in range(npp):
                        acc = 0
                        for n in range(nn):
                            acc = acc + Cm[b, t, h, n] * S[b, h, n, p]
                        Y[b, t, h, p] = acc + D[h] * X[b, t, h, p]
    return out


def q4_matmul(const unsigned char[::1] packed,
              const float[::1] scales,
              const unsigned char[::1] zeros,
              Py_ssize_t m, Py_ssize_t k, Py_ssize_t group,
              floating[:, ::1] X):
    """Compute ``X @ W.T`` with W (m, k) stored as packed 4-bit codes.

    Codes are little-nibble-first over the flattened row-major tensor; groups
    tile each row, the last one possibly ragged.
    """
    cdef Py_ssize_t r, nr = X.shape[0], row, col, gi, gpr, idx, g0, g1
    cdef double acc, part, sc
    cdef int zp, code
    cdef unsigned char byte
    gpr = (k + group - 1) // group
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((nr, m), dtype=dtype)
    cdef floating[:, ::1] Y = out
    with nogil:
        for r in range(nr):
            for row in range(m):
                acc = 0.0
                for gi in range(gpr):
                    sc = scales[row * gpr + gi]
                    zp = zeros[row * gpr + gi]
                    g0 = gi * group
                    g1 = g0 + group
                    if g1 > k:
                        g1 = k
                    part = 0.0
                    for col in range(g0, g1):
                        idx = row * k + col
                        byte = packed[idx >> 1]
                        if idx & 1:
                            code = byte >> 4
                        else:
                            code = byte & 15
                        part = part + <float>((code - zp) * <float>sc) * X[r, col]
                    acc = acc + part
                Y[r, row] = acc
    return out
