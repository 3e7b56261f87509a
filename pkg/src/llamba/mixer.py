"""Discrete Mamba-2 sequence mixer.

Per head h the mixer keeps an N x P state and applies

    S_t = a_t * S_{t-1} + B_t x_t^T
    y_t = C_t^T S_t + D * x_t

where a_t = sigmoid(w_a . u_t + b_a) is projected straight from the input
(no step-size discretisation). x, B and C pass through a width-4 causal
convolution with no activation afterwards; the gate z skips the conv and the
gated output goes to the output projection without normalisation.

Three evaluation schedules are provided and agree to rounding error:
``recurrent_step`` (decode), ``forward_parallel`` (chunked scan) and
``materialize_mixer`` (the explicit lower-triangular T x T operator).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.optimize import brentq

from . import kernels
from .quant import linear
from .tensor import DimensionError, segprod, sigmoid, silu

log = logging.getLogger(__name__)

CONV_WIDTH = 4

# SiLU(b) == 1, so a zero-weight gate passes its input through unchanged.
GATE_UNIT_BIAS = brentq(lambda v: v * sigmoid(v) - 1.0, 0.0, 4.0, xtol=1e-15)

_ARRAYS = ("W_x", "W_z", "b_z", "W_B", "W_C", "W_a", "b_a",
           "conv_x", "conv_B", "conv_C", "D", "W_out")

# parameters that shape the materialised mixer (trained in matrix orientation)
MATRIX_PARAMS = ("W_B", "W_C", "W_a", "b_a", "conv_B", "conv_C")


@dataclass(frozen=True)
class MixerParams:
    """Weights of one mixer. Linear weights are (out_features, in_features).

    The fused input projection is split by stream: W_x (H*P, d), W_z (H*P, d),
    W_B (H*N, d), W_C (H*N, d) and W_a (H, d); rows of W_B / W_C for head h
    are ``h*N:(h+1)*N`` so every head owns its own B and C.
    """

    W_x: np.ndarray
    W_z: np.ndarray
    b_z: np.ndarray
    W_B: np.ndarray
    W_C: np.ndarray
    W_a: np.ndarray
    b_a: np.ndarray
    conv_x: np.ndarray
    conv_B: np.ndarray
    conv_C: np.ndarray
    D: np.ndarray
    W_out: np.ndarray
    n_heads: int
    head_dim: int
    state_dim: int

    def __post_init__(self):
        H, P, N = self.n_heads, self.head_dim, self.state_dim
        d = self.W_x.shape[1]
        expect = {
            "W_x": (H * P, d), "W_z": (H * P, d), "b_z": (H * P,),
            "W_B": (H * N, d), "W_C": (H * N, d), "W_a": (H, d), "b_a": (H,),
            "conv_x": (H * P, CONV_WIDTH), "conv_B": (H * N, CONV_WIDTH),
            "conv_C": (H * N, CONV_WIDTH), "D": (H,), "W_out": (d, H * P),
        }
        for name, shape in expect.items():
            got = tuple(getattr(self, name).shape)
            if got != shape:
                raise DimensionError(f"mixer {name}: expected {shape}, got {got}")

    @property
    def d_model(self) -> int:
        return self.W_x.shape[1]

    @property
    def dtype(self):
        return self.D.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in _ARRAYS}

    @classmethod
    def from_dict(cls, arrays, n_heads, head_dim, state_dim, prefix=""):
        return cls(**{k: arrays[prefix + k] for k in _ARRAYS},
                   n_heads=n_heads, head_dim=head_dim, state_dim=state_dim)

    def replace(self, **kw) -> "MixerParams":
        return replace(self, **kw)


@dataclass
class RecurrentState:
    """Fixed-size decode state for one mixer.

    ``S`` is (batch, H, N, P); ``conv`` holds the last k-1 conv inputs of the
    x/B/C streams, (batch, k-1, H*P + 2*H*N).
    """

    S: np.ndarray
    conv: np.ndarray
    position: int = 0

    @classmethod
    def zeros(cls, params: MixerParams, batch: int = 1, dtype=None) -> "RecurrentState":
        dtype = params.dtype if dtype is None else dtype
        H, P, N = params.n_heads, params.head_dim, params.state_dim
        return cls(np.zeros((batch, H, N, P), dtype=dtype),
                   np.zeros((batch, CONV_WIDTH - 1, H * P + 2 * H * N), dtype=dtype))

    @property
    def nbytes(self) -> int:
        # position counter is stored as one int64
        return int(self.S.nbytes + self.conv.nbytes + 8)

    def copy(self) -> "RecurrentState":
        return RecurrentState(self.S.copy(), self.conv.copy(), self.position)


def state_nbytes(n_heads, head_dim, state_dim, dtype=np.float32, batch=1, width=CONV_WIDTH) -> int:
    item = np.dtype(dtype).itemsize
    conv_ch = n_heads * head_dim + 2 * n_heads * state_dim
    return batch * item * (n_heads * state_dim * head_dim + (width - 1) * conv_ch) + 8


@dataclass
class MixerProjections:
    """Per-step streams: x/z (..., T, H, P), B/C (..., T, H, N), a (..., T, H)."""

    x: np.ndarray
    z: np.ndarray
    B: np.ndarray
    C: np.ndarray
    a: np.ndarray

    def squeeze_batch(self) -> "MixerProjections":
        return MixerProjections(*(getattr(self, f.name)[0] for f in fields(self)))


def _as_batch(x, d):
    x = np.asarray(x)
    if x.ndim == 2:
        x3 = x[None]
    elif x.ndim == 3:
        x3 = x
    else:
        raise DimensionError(f"expected (T, d) or (batch, T, d) input, got {x.shape}")
    if x3.shape[-1] != d:
        raise DimensionError(f"input width {x3.shape[-1]} does not match d_model {d}")
    if x3.shape[1] == 0:
        raise ValueError("empty sequence (T = 0)")
    return x3, x.ndim == 2


def causal_conv(streams, kernel, buf=None):
    """Depthwise causal conv of width k. ``buf`` holds the previous k-1 inputs."""
    nb, nt, ch = streams.shape
    k = kernel.shape[1]
    if buf is None:
        buf = np.zeros((nb, k - 1, ch), dtype=streams.dtype)
    padded = np.concatenate([buf, streams], axis=1)
    out = np.zeros_like(streams)
    for j in range(k):
        out += padded[:, j:j + nt, :] * kernel[:, j]
    return out, padded[:, nt:, :].copy()


def _project(params: MixerParams, x3, buf=None):
    H, P, N = params.n_heads, params.head_dim, params.state_dim
    nb, nt, _ = x3.shape
    xs = linear(x3, params.W_x)
    z = linear(x3, params.W_z) + params.b_z
    bs = linear(x3, params.W_B)
    cs = linear(x3, params.W_C)
    a = sigmoid(linear(x3, params.W_a) + params.b_a)
    kernel = np.concatenate([params.conv_x, params.conv_B, params.conv_C], axis=0)
    mixed, new_buf = causal_conv(np.concatenate([xs, bs, cs], axis=-1), kernel, buf)
    hp, hn = H * P, H * N
    proj = MixerProjections(
        x=mixed[..., :hp].reshape(nb, nt, H, P),
        z=z.reshape(nb, nt, H, P),
        B=mixed[..., hp:hp + hn].reshape(nb, nt, H, N),
        C=mixed[..., hp + hn:].reshape(nb, nt, H, N),
        a=a,
    )
    return proj, new_buf


def project_inputs(params: MixerParams, x) -> MixerProjections:
    """Input projections after the causal conv, for a (T, d) or (batch, T, d) input."""
    x3, single = _as_batch(x, params.d_model)
    if not np.all(np.isfinite(x3)):
        raise ValueError("non-finite mixer input")
    proj, _ = _project(params, x3.astype(params.dtype, copy=False))
    return proj.squeeze_batch() if single else proj


def materialize_mixer(proj: MixerProjections) -> np.ndarray:
    """Explicit mixing matrix, (H, T, T) or (batch, H, T, T).

    ``M[h, i, j] = (C_i . B_j) * prod(a_{j+1..i})`` on and below the diagonal.
    The D skip and the gate sit outside this operator.
    """
    if proj.x.shape[-3] < 1:
        raise ValueError("materialize_mixer needs T >= 1")
    C = np.moveaxis(proj.C, -2, -3)   # (..., H, T, N)
    B = np.moveaxis(proj.B, -2, -3)
    gram = C @ np.swapaxes(B, -1, -2)
    return gram * segprod(np.swapaxes(proj.a, -1, -2))


def _gate_out(params: MixerParams, y, z, nb, nt):
    g = (y * silu(z)).reshape(nb, nt, -1)
    return linear(g, params.W_out)


def _scan_chunked(proj: MixerProjections, D, S, chunk):
    nb, nt, H, P = proj.x.shape
    y = np.empty_like(proj.x)
    for s in range(0, nt, chunk):
        e = min(s + chunk, nt)
        X, Bc, Cc = proj.x[:, s:e], proj.B[:, s:e], proj.C[:, s:e]
        a = np.swapaxes(proj.a[:, s:e], 1, 2)          # (b, H, q)
        L = segprod(a)                                  # (b, H, q, q)
        gram = np.einsum("bihn,bjhn->bhij", Cc, Bc)
        intra = np.einsum("bhij,bjhp->bihp", gram * L, X)
        decay = np.exp(np.cumsum(np.log(a), axis=-1))   # prod a_{s..t}
        inter = np.einsum("bthn,bhnp->bthp", Cc, S) * np.swapaxes(decay, 1, 2)[..., None]
        y[:, s:e] = intra + inter + D[:, None] * X
        S = decay[..., -1, None, None] * S + np.einsum("bhj,bjhn,bjhp->bhnp", L[..., -1, :], Bc, X)
    return y, S


def forward_parallel(params: MixerParams, x, chunk: int = 64, state: RecurrentState | None = None,
                     return_state: bool = False):
    """Chunked-scan evaluation over a whole sequence.

    Each chunk is mixed with its materialised intra-chunk matrix; the state
    carried between chunks is the decayed previous state plus the chunk's
    own contribution. Returns (T, d) or (batch, T, d), plus the final
    :class:`RecurrentState` when ``return_state`` is set.
    """
    if chunk < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk}")
    x3, single = _as_batch(x, params.d_model)
    x3 = x3.astype(params.dtype, copy=False)
    nb, nt, _ = x3.shape
    if state is None:
        state = RecurrentState.zeros(params, nb)
    proj, buf = _project(params, x3, state.conv)
    y, S = _scan_chunked(proj, params.D, state.S, min(chunk, nt))
    out = _gate_out(params, y, proj.z, nb, nt)
    out = out[0] if single else out
    if return_state:
        return out, RecurrentState(np.ascontiguousarray(S), buf, state.position + nt)
    return out


def forward_recurrent(params: MixerParams, x, state: RecurrentState | None = None,
                      return_state: bool = False, force_a: float | None = None,
                      backend: str | None = None):
    """Token-by-token recurrence over a whole sequence (one kernel call)."""
    x3, single = _as_batch(x, params.d_model)
    x3 = x3.astype(params.dtype, copy=False)
    nb, nt, _ = x3.shape
    if state is None:
        state = RecurrentState.zeros(params, nb)
    proj, buf = _project(params, x3, state.conv)
    a = proj.a if force_a is None else np.full_like(proj.a, force_a)
    S = state.S.copy()
    y = kernels.ssm_scan(a, proj.B, proj.C, proj.x, params.D, S, backend=backend)
    _check_state(S)
    out = _gate_out(params, y, proj.z, nb, nt)
    out = out[0] if single else out
    if return_state:
        return out, RecurrentState(S, buf, state.position + nt)
    return out


def _check_state(S):
    bad = ~np.isfinite(S).reshape(S.shape[0], S.shape[1], -1).all(axis=(0, 2))
    if bad.any():
        raise FloatingPointError(f"non-finite recurrent state in head {int(np.argmax(bad))}")


def recurrent_step(params: MixerParams, state: RecurrentState, x_t, force_a: float | None = None,
                   backend: str | None = None):
    """Advance one token. ``x_t`` is (d,) or (batch, d); returns (new_state, y_t).

    ``force_a`` overrides the projected decay (testing hook for the a=0 and
    a=1 limits).
    """
    x_t = np.asarray(x_t)
    single = x_t.ndim == 1
    xb = x_t[None, None, :] if single else x_t[:, None, :]
    out, new_state = forward_recurrent(params, xb, state, return_state=True,
                                       force_a=force_a, backend=backend)
    y = out[0, 0] if single else out[:, 0]
    return new_state, y


def init_mixer(d_model, n_heads, head_dim, state_dim, rng: np.random.Generator,
               identity: bool = True, dtype=np.float32, a_bias: float = 2.0) -> MixerParams:
    """Fresh mixer weights.

    With ``identity`` the mixer maps its input to itself: identity conv
    kernels, zero C projection (so the mixing matrix is 0), unit gate, D = 1
    and W_out inverting W_x. B and the decay projection stay random so
    matrix orientation has a non-degenerate gradient.
    """
    H, P, N, d = n_heads, head_dim, state_dim, d_model
    hp, hn = H * P, H * N
    std = 1.0 / np.sqrt(d)

    def rand(*shape, s=std):
        return rng.standard_normal(shape) * s

    ident_kernel = np.zeros(CONV_WIDTH)
    ident_kernel[-1] = 1.0
    if identity:
        if hp == d:
            W_x = np.eye(hp, d)
        else:
            q, _ = np.linalg.qr(rng.standard_normal((max(hp, d), min(hp, d))))
            W_x = q if hp > d else q.T
            if hp < d:
                log.warning("H*P=%d < d=%d: identity init is only a projection", hp, d)
        p = dict(
            W_x=W_x, W_z=np.zeros((hp, d)), b_z=np.full(hp, GATE_UNIT_BIAS),
            W_B=rand(hn, d), W_C=np.zeros((hn, d)),
            W_a=rand(H, d, s=0.02), b_a=np.full(H, a_bias),
            conv_x=np.tile(ident_kernel, (hp, 1)), conv_B=np.tile(ident_kernel, (hn, 1)),
            conv_C=np.tile(ident_kernel, (hn, 1)), D=np.ones(H), W_out=W_x.T.copy(),
        )
    else:
        p = dict(
            W_x=rand(hp, d), W_z=rand(hp, d), b_z=rand(hp, s=0.5),
            W_B=rand(hn, d), W_C=rand(hn, d), W_a=rand(H, d), b_a=rand(H, s=1.0) + 1.0,
            conv_x=ident_kernel + rand(hp, CONV_WIDTH, s=0.3),
            conv_B=ident_kernel + rand(hn, CONV_WIDTH, s=0.3),
            conv_C=ident_kernel + rand(hn, CONV_WIDTH, s=0.3),
            D=rand(H, s=1.0), W_out=rand(d, hp, s=1.0 / np.sqrt(hp)),
        )
    p = {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()}
    return MixerParams(**p, n_heads=H, head_dim=P, state_dim=N)
