"""Kernel backend selection.

The compiled extension is used when it was built; otherwise (or when
``LLAMBA_PURE_PYTHON=1`` is set) the numpy implementations take over.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("LLAMBA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"
else:
    _compiled = None


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])


def get_backend(name: str | None = None):
    """Module implementing the kernels for ``name`` (default: the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def ssm_scan(a, Bm, Cm, X, D, S, backend: str | None = None):
    """Sequential recurrence; ``S`` (b, h, n, p) is updated in place."""
    dt = X.dtype
    args = [np.ascontiguousarray(v, dtype=dt) for v in (a, Bm, Cm, X, D)]
    if S.dtype != dt or not S.flags.c_contiguous:
        raise TypeError("state must be a C-contiguous array of the input dtype")
    return get_backend(backend).ssm_scan(*args, S)


def q4_matmul(packed, scales, zeros, m, k, group, X, backend: str | None = None):
    X = np.ascontiguousarray(X)
    if X.dtype not in (np.float32, np.float64):
        X = X.astype(np.float32)
    return get_backend(backend).q4_matmul(packed, scales, zeros, m, k, group, X)
