"""Pure numpy fallback for the compiled kernels, same signatures and semantics."""

from __future__ import annotations

import numpy as np


def ssm_scan(a, Bm, Cm, X, D, S):
    nt = X.shape[1]
    out = np.empty_like(X)
    for t in range(nt):
        S *= a[:, t, :, None, None]
        S += Bm[:, t, :, :, None] * X[:, t, :, None, :]
        out[:, t] = np.einsum("bhn,bhnp->bhp", Cm[:, t], S) + D[None, :, None] * X[:, t]
    return out


def unpack_codes(packed, n):
    codes = np.empty(2 * packed.size, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    return codes[:n]


def dequantize_codes(packed, scales, zeros, m, k, group):
    codes = unpack_codes(packed, m * k).reshape(m, k).astype(np.float32)
    gpr = -(-k // group)
    col_group = np.arange(k) // group
    sc = scales.reshape(m, gpr)[:, col_group]
    zp = zeros.reshape(m, gpr)[:, col_group].astype(np.float32)
    return (codes - zp) * sc


def q4_matmul(packed, scales, zeros, m, k, group, X):
    w = dequantize_codes(packed, scales, zeros, m, k, group)
    return X @ w.T.astype(X.dtype, copy=False)
