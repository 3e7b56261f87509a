"""Dense tensor kernels shared by every other module.

Tensors are plain row-major numpy arrays of float32 or float64. The helpers
here add the checks the rest of the package relies on: no implicit
broadcasting, matching dtypes, and explicit error messages on shape mismatch.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested kernel."""


def tensor(data, dtype=np.float32) -> Tensor:
    """Build a contiguous tensor, promoting 0-d input to shape ``(1,)``."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if arr.dtype not in DTYPES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(n < 1 for n in arr.shape):
        raise DimensionError(f"all extents must be >= 1, got {arr.shape}")
    return arr


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must be identical; they are never broadcast.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} vs {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise TypeError(f"matmul dtype mismatch: {a.dtype} vs {b.dtype}")
    return np.matmul(a, b)


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows and gives sigmoid(0) == 0.5 exactly
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    return x * sigmoid(x)


_UNARY = {"silu": silu, "sigmoid": sigmoid, "exp": np.exp}
_BINARY = {"add": np.add, "mul": np.multiply}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        _same_shape(a, b, op)
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicitly tile ``a`` up to ``shape`` (numpy broadcasting rules)."""
    return np.ascontiguousarray(np.broadcast_to(a, tuple(shape)))


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def softmax_rows(a: Tensor, causal: bool = False, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis with optional causal / boolean mask.

    Masked entries come out exactly zero. A row with no unmasked entry cannot
    be normalised and raises.
    """
    keep = None
    if causal:
        if a.shape[-1] != a.shape[-2]:
            raise DimensionError(f"causal softmax needs square rows, got {a.shape}")
        keep = causal_mask(a.shape[-1])
    if mask is not None:
        keep = mask if keep is None else keep & mask
    if keep is None:
        shifted = a - a.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    keep = np.broadcast_to(keep, a.shape)
    if not keep.any(axis=-1).all():
        raise ValueError("softmax_rows: a row is fully masked")
    masked = np.where(keep, a, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0).astype(a.dtype, copy=False)
    return e / e.sum(axis=-1, keepdims=True)


def segprod(a: Tensor) -> Tensor:
    """Lower-triangular decay products along the last axis.

    ``out[..., i, j] = prod(a[..., j+1:i+1])`` for ``j <= i`` and 0 above the
    diagonal. Factors must be positive; products are formed in log space so
    long runs underflow to 0 cleanly instead of producing 0/0.
    """
    if np.any(a <= 0):
        raise ValueError("segprod requires strictly positive factors")
    t = a.shape[-1]
    cs = np.cumsum(np.log(a), axis=-1)
    diff = cs[..., :, None] - cs[..., None, :]
    keep = causal_mask(t)
    return np.where(keep, np.exp(np.where(keep, diff, 0.0)), 0.0).astype(a.dtype, copy=False)
