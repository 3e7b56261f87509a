"""4-bit group quantization of weight matrices.

Affine min/max scheme per group of ``group_size`` consecutive weights along
the innermost axis: ``w ~= (code - zero_point) * scale`` with codes and zero
points in [0, 15]. The quantized range always contains 0, so zero is
represented exactly and all-positive or all-negative groups do not clamp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from ._kernels_py import dequantize_codes, unpack_codes

GROUP_SIZE = 32
LEVELS = 15


@dataclass(frozen=True)
class QuantTensor:
    """Packed 4-bit weights.

    ``packed`` holds the codes of the flattened row-major tensor, two per
    byte, low nibble first. ``scales`` (float32) and ``zeros`` (one code per
    uint8 in memory, nibble-packed on disk) have one entry per group; groups
    tile each row of the innermost axis and the last group may be ragged.
    """

    shape: tuple
    group_size: int
    scales: np.ndarray
    zeros: np.ndarray
    packed: np.ndarray

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def cols(self) -> int:
        return self.shape[-1]

    @property
    def rows(self) -> int:
        return self.size // self.cols

    @property
    def groups_per_row(self) -> int:
        return -(-self.cols // self.group_size)

    @property
    def n_groups(self) -> int:
        return self.rows * self.groups_per_row

    @property
    def nbytes(self) -> int:
        """Storage cost: codes + float32 scales + nibble-packed zero points."""
        return int(self.packed.nbytes + self.scales.nbytes + (self.n_groups + 1) // 2)

    @property
    def codes(self) -> np.ndarray:
        return unpack_codes(self.packed, self.size).reshape(self.shape)

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint8).ravel()
    if c.size % 2:
        c = np.append(c, np.uint8(0))
    return (c[0::2] & 0x0F) | (c[1::2] << 4)


def quantize(w, group_size: int = GROUP_SIZE, name: str = "weight") -> QuantTensor:
    w = np.asarray(w)
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    if not np.all(np.isfinite(w)):
        raise ValueError(f"non-finite value in tensor {name!r}")
    shape = tuple(w.shape) if w.ndim else (1,)
    k = shape[-1]
    rows = int(np.prod(shape)) // k
    gpr = -(-k // group_size)
    flat = w.reshape(rows, k).astype(np.float64)
    # ragged tail padded with its row's last value: leaves min/max untouched
    padded = np.pad(flat, ((0, 0), (0, gpr * group_size - k)), mode="edge")
    groups = padded.reshape(rows, gpr, group_size)
    gmin = groups.min(axis=-1)
    gmax = groups.max(axis=-1)
    lo = np.minimum(gmin, 0.0)
    hi = np.maximum(gmax, 0.0)

    const = gmax == gmin
    scale = np.where(const, 1.0, (hi - lo) / LEVELS).astype(np.float32)
    # ranges below float32 resolution would round the scale to 0
    scale = np.maximum(scale, np.finfo(np.float32).tiny)
    # a constant group c != 0 is stored as scale=|c|, zp=1, code=1+sign(c): exact
    scale = np.where(const & (gmin != 0), np.abs(gmin), scale).astype(np.float32)
    # constant groups skip the affine path, so they divide by a dummy 1
    s64 = np.where(const, 1.0, scale.astype(np.float64))
    zp = np.where(const, 0.0, np.clip(np.round(-lo / s64), 0, LEVELS))
    zp = np.where(const & (gmin != 0), 1.0, zp)

    s64 = s64[..., None]
    codes = np.clip(np.round(groups / s64) + zp[..., None], 0, LEVELS)
    codes = np.where(const[..., None], zp[..., None] + np.sign(gmin)[..., None], codes)
    codes = codes.reshape(rows, gpr * group_size)[:, :k].astype(np.uint8)
    return QuantTensor(shape, group_size, scale.ravel(), zp.astype(np.uint8).ravel(),
                       pack_nibbles(codes))


def dequantize(q: QuantTensor) -> np.ndarray:
    w = dequantize_codes(q.packed, q.scales, q.zeros, q.rows, q.cols, q.group_size)
    return w.reshape(q.shape)


def dequant_matmul(q: QuantTensor, x, fused: bool = False, backend: str | None = None):
    """``W @ x`` for W (M, K) quantized and x (K,) or (R, K) -> (M,) or (R, M).

    The reference path dequantizes then multiplies. ``fused`` runs the
    streaming kernel, which matches to ~1e-6 relative.
    """
    if q.ndim != 2:
        raise ValueError(f"dequant_matmul needs a 2-D weight, got shape {q.shape}")
    x = np.asarray(x)
    m, k = q.shape
    if x.shape[-1] != k or x.ndim not in (1, 2):
        raise ValueError(f"dequant_matmul: weight {q.shape} incompatible with input {x.shape}")
    if not fused:
        w = dequantize(q)
        if x.dtype == np.float64:
            w = w.astype(np.float64)
        return w @ x if x.ndim == 1 else x @ w.T
    y = kernels.q4_matmul(q.packed, q.scales, q.zeros, m, k, q.group_size,
                          x.reshape(-1, k), backend=backend)
    return y[0] if x.ndim == 1 else y


def linear(x, w):
    """``x @ w.T`` over the last axis of x; ``w`` may be a QuantTensor."""
    if isinstance(w, QuantTensor):
        lead = x.shape[:-1]
        y = dequant_matmul(w, np.asarray(x).reshape(-1, w.shape[1]), fused=True)
        return y.reshape(lead + (w.shape[0],))
    return x @ w.T


def nbytes(w) -> int:
    return w.nbytes if isinstance(w, (QuantTensor, np.ndarray)) else 0


class AlreadyQuantizedError(ValueError):
    pass


def is_linear_weight(name: str, value) -> bool:
    """Linear (matmul) weights: 2-D float arrays other than embeddings and conv kernels."""
    leaf = name.rsplit(".", 1)[-1]
    return (isinstance(value, np.ndarray) and value.ndim == 2 and leaf != "embed"
            and not leaf.startswith("conv_"))


def quantize_params(params: dict, group_size: int = GROUP_SIZE) -> dict:
    """Quantize every linear weight; norms, biases, conv kernels and embeddings stay float32."""
    if any(isinstance(v, QuantTensor) for v in params.values()):
        raise AlreadyQuantizedError("parameters are already quantized")
    out = {}
    for name, v in params.items():
        if is_linear_weight(name, v):
            out[name] = quantize(v, group_size, name=name)
        else:
            out[name] = np.asarray(v, dtype=np.float32)
    return out
