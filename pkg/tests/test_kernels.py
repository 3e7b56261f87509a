import os
import subprocess
import sys

import numpy as np
import pytest

from conftest import rel_err
from llamba import kernels
from llamba.quant import quantize

BACKENDS = kernels.available_backends()


def loop_scan(a, B, C, X, D, S):
    """Per-element recurrence over python floats."""
    nb, nt, H, P = X.shape
    N = B.shape[-1]
    y = np.zeros_like(X)
    for b in range(nb):
        for t in range(nt):
            for h in range(H):
                for n in range(N):
                    for p in range(P):
                        S[b, h, n, p] = a[b, t, h] * S[b, h, n, p] + B[b, t, h, n] * X[b, t, h, p]
                for p in range(P):
                    y[b, t, h, p] = sum(C[b, t, h, n] * S[b, h, n, p] for n in range(N)) + D[h] * X[b, t, h, p]
    return y


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_scan_matches_loop(backend, dtype, rng):
    nb, nt, H, P, N = 2, 5, 2, 3, 4
    a = rng.uniform(0.2, 1, (nb, nt, H)).astype(dtype)
    B, C = rng.standard_normal((2, nb, nt, H, N)).astype(dtype)
    X = rng.standard_normal((nb, nt, H, P)).astype(dtype)
    D = rng.standard_normal(H).astype(dtype)
    S0 = rng.standard_normal((nb, H, N, P)).astype(dtype)
    S_ref = S0.astype(np.float64)
    y_ref = loop_scan(a.astype(np.float64), B.astype(np.float64), C.astype(np.float64),
                      X.astype(np.float64), D.astype(np.float64), S_ref)
    S = S0.copy()
    y = kernels.ssm_scan(a, B, C, X, D, S, backend=backend)
    tol = 1e-5 if dtype == np.float32 else 1e-13
    assert y.dtype == dtype
    assert rel_err(y, y_ref) < tol and rel_err(S, S_ref) < tol


def test_scan_rejects_bad_state(rng):
    S = np.zeros((1, 1, 2, 2), dtype=np.float32)
    with pytest.raises(TypeError):
        kernels.ssm_scan(np.ones((1, 1, 1)), np.ones((1, 1, 1, 2)), np.ones((1, 1, 1, 2)),
                         np.ones((1, 1, 1, 2)), np.ones(1), S)


@pytest.mark.parametrize("backend", BACKENDS)
def test_q4_matmul_matches_dequantized(backend, rng):
    w = rng.standard_normal((9, 45))
    q = quantize(w, group_size=16)
    X = rng.standard_normal((3, 45))
    y = kernels.q4_matmul(q.packed, q.scales, q.zeros, 9, 45, 16, X, backend=backend)
    assert rel_err(y, X @ q.dequantize().astype(np.float64).T) < 1e-6


def test_backend_lookup():
    assert "python" in BACKENDS
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_python_switch():
    env = dict(os.environ, LLAMBA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from llamba import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
