"""Differentiable forward passes recorded on an autodiff tape.

These mirror the numpy inference code in :mod:`llamba.model` and
:mod:`llamba.mixer` but are written only in terms of the tape's closed op
set. The mixer is evaluated in its materialised form, which is also what the
matrix-orientation loss compares against the teacher.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape
from .model import LlambaConfig, TeacherConfig, _recency_bias


def bind(tape: Tape, params: dict, trainable=()) -> dict[str, int]:
    """Put every parameter on the tape as a named leaf."""
    trainable = set(trainable)
    return {k: tape.leaf(v, trainable=k in trainable, name=k) for k, v in params.items()}


def _shift_matrix(t, lag, dtype):
    # row i picks input i - lag
    return np.eye(t, k=-lag, dtype=dtype)


def causal_conv(tape: Tape, x, kernel):
    """Depthwise causal conv of (B, T, C) with a (C, k) kernel, zero history."""
    nb, nt, ch = tape.shape(x)
    k = tape.shape(kernel)[1]
    dtype = tape.value(x).dtype
    out = None
    for j in range(k):
        lag = k - 1 - j
        if lag >= nt:
            continue
        if lag == 0:
            xs = x
        else:
            shift = np.broadcast_to(_shift_matrix(nt, lag, dtype), (nb, nt, nt)).copy()
            xs = tape.matmul(tape.const(shift), x)
        pick = np.zeros((k, 1), dtype=dtype)
        pick[j] = 1.0
        col = tape.reshape(tape.matmul(kernel, tape.const(pick)), (1, 1, ch))
        term = tape.mul(xs, tape.broadcast_to(col, (nb, nt, ch)))
        out = term if out is None else tape.add(out, term)
    return out


def mixer(tape: Tape, pn: dict, prefix: str, n_heads, head_dim, state_dim, u):
    """Mixer over u (B, T, d). Returns (output node, materialised matrix node)."""
    H, P, N = n_heads, head_dim, state_dim
    nb, nt, _ = tape.shape(u)
    w = {k[len(prefix):]: v for k, v in pn.items() if k.startswith(prefix)}
    xs = causal_conv(tape, tape.linear(u, w["W_x"]), w["conv_x"])
    z = tape.add_bias(tape.linear(u, w["W_z"]), w["b_z"])
    bs = causal_conv(tape, tape.linear(u, w["W_B"]), w["conv_B"])
    cs = causal_conv(tape, tape.linear(u, w["W_C"]), w["conv_C"])
    a = tape.sigmoid(tape.add_bias(tape.linear(u, w["W_a"]), w["b_a"]))

    def heads(node, width):
        return tape.transpose(tape.reshape(node, (nb, nt, H, width)), (0, 2, 1, 3))

    X, Bm, Cm = heads(xs, P), heads(bs, N), heads(cs, N)
    gram = tape.matmul(Cm, tape.transpose(Bm, (0, 1, 3, 2)))
    M = tape.mul(gram, tape.segprod(tape.transpose(a, (0, 2, 1))))
    Dh = tape.broadcast_to(tape.reshape(w["D"], (1, H, 1, 1)), (nb, H, nt, P))
    Y = tape.add(tape.matmul(M, X), tape.mul(Dh, X))
    Y = tape.reshape(tape.transpose(Y, (0, 2, 1, 3)), (nb, nt, H * P))
    out = tape.linear(tape.mul(Y, tape.silu(z)), w["W_out"])
    return out, M


def gated_mlp(tape: Tape, pn: dict, prefix: str, x):
    g = tape.silu(tape.linear(x, pn[prefix + "mlp.gate"]))
    return tape.linear(tape.mul(g, tape.linear(x, pn[prefix + "mlp.up"])), pn[prefix + "mlp.down"])


def student(tape: Tape, pn: dict, cfg: LlambaConfig, tokens):
    """Full student on tokens (B, T). Returns (logits node (B*T, V), per-layer M nodes)."""
    tokens = np.asarray(tokens)
    nb, nt = tokens.shape
    h = tape.gather(pn["embed"], tokens)
    mats = []
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        u = tape.rmsnorm(h, pn[pre + "norm1"], cfg.norm_eps)
        mo, M = mixer(tape, pn, pre + "mixer.", cfg.n_heads, cfg.head_dim, cfg.state_dim, u)
        mats.append(M)
        h = tape.add(h, mo)
        h = tape.add(h, gated_mlp(tape, pn, pre, tape.rmsnorm(h, pn[pre + "norm2"], cfg.norm_eps)))
    return _head(tape, pn, cfg, h, nb * nt), mats


def _head(tape, pn, cfg, h, rows):
    hf = tape.rmsnorm(h, pn["norm_f"], cfg.norm_eps)
    head = pn["embed"] if cfg.tie_embeddings else pn["head"]
    return tape.reshape(tape.linear(hf, head), (rows, cfg.vocab))


def attention(tape: Tape, pn: dict, prefix: str, cfg: TeacherConfig, u):
    """Causal softmax attention over u (B, T, d). Returns (output, probs)."""
    nb, nt, _ = tape.shape(u)
    H, Hk, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    dtype = tape.value(u).dtype
    q = tape.transpose(tape.reshape(tape.linear(u, pn[prefix + "W_q"]), (nb, nt, H, hd)), (0, 2, 1, 3))
    k = tape.linear(u, pn[prefix + "W_k"])
    v = tape.linear(u, pn[prefix + "W_v"])
    if Hk != H:
        # replicate each kv head over its query group: (Hk*hd) -> (H*hd)
        expand = np.zeros((H * hd, Hk * hd), dtype=dtype)
        for h in range(H):
            g = h // (H // Hk)
            expand[h * hd:(h + 1) * hd, g * hd:(g + 1) * hd] = np.eye(hd)
        e = tape.const(expand)
        k, v = tape.linear(k, e), tape.linear(v, e)
    k = tape.transpose(tape.reshape(k, (nb, nt, H, hd)), (0, 2, 1, 3))
    v = tape.transpose(tape.reshape(v, (nb, nt, H, hd)), (0, 2, 1, 3))
    scores = tape.scale(tape.matmul(q, tape.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    bias = _recency_bias(cfg, nt, dtype)
    if bias is not None:
        scores = tape.add(scores, tape.const(np.broadcast_to(bias, (nb, H, nt, nt)).copy()))
    probs = tape.softmax_rows(scores, causal=True)
    ctx = tape.reshape(tape.transpose(tape.matmul(probs, v), (0, 2, 1, 3)), (nb, nt, H * hd))
    return tape.linear(ctx, pn[prefix + "W_o"]), probs


def teacher(tape: Tape, pn: dict, cfg: TeacherConfig, tokens):
    """Full teacher on tokens (B, T). Returns (logits node (B*T, V), per-layer probs)."""
    tokens = np.asarray(tokens)
    nb, nt = tokens.shape
    h = tape.gather(pn["embed"], tokens)
    probs = []
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        u = tape.rmsnorm(h, pn[pre + "norm1"], cfg.norm_eps)
        ao, pr = attention(tape, pn, pre + "attn.", cfg, u)
        probs.append(pr)
        h = tape.add(h, ao)
        h = tape.add(h, gated_mlp(tape, pn, pre, tape.rmsnorm(h, pn[pre + "norm2"], cfg.norm_eps)))
    return _head(tape, pn, cfg, h, nb * nt), probs


def matrix_orientation(tape: Tape, M, A):
    """Mean over (batch, heads) of ||M - A||_F^2 / T^2; A is a constant array."""
    diff = tape.sub(M, tape.const(A))
    return tape.mean(tape.mul(diff, diff))


def hidden_alignment(tape: Tape, out, target):
    """Mean over positions of ||out - target||^2 / d; target is a constant array."""
    diff = tape.sub(out, tape.const(target))
    return tape.mean(tape.mul(diff, diff))


def one_hot(ids, vocab, dtype):
    ids = np.asarray(ids).reshape(-1)
    out = np.zeros((ids.size, vocab), dtype=dtype)
    out[np.arange(ids.size), ids] = 1.0
    return out
