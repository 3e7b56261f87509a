"""Reverse-mode autodiff over the tensor kernels.

A :class:`Tape` evaluates every op eagerly as it is recorded and keeps the
values the backward rules need. ``backward`` walks the tape in strict reverse
recording order and returns a :class:`GradMap` keyed by leaf node id.

The op set is closed: add, mul, matmul, silu, sigmoid, exp, sum, mean,
reshape, transpose, broadcast_to, softmax_rows, rmsnorm, segprod (the
lower-triangular cumulative product of decay factors), gather and
cross_entropy. Everything the MOHAWK losses need is composed from these.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


class UnsupportedOpError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    saved: dict = field(default_factory=dict)


class GradMap(dict):
    """Leaf node id -> gradient with the leaf's shape."""

    def named(self, tape: "Tape") -> dict[str, np.ndarray]:
        return {tape.names[i]: g for i, g in self.items() if i in tape.names}


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g.reshape(()), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


# Each rule: forward(values, **attrs) -> (out, saved);
# backward(g, values, out, saved, **attrs) -> per-input grads (None = not differentiable)

def _f_add(v):
    return T.add(v[0], v[1]), {}


def _b_add(g, v, out, s):
    return g, g


def _f_mul(v):
    return T.mul(v[0], v[1]), {}


def _b_mul(g, v, out, s):
    return g * v[1], g * v[0]


def _f_matmul(v):
    return T.matmul(v[0], v[1]), {}


def _b_matmul(g, v, out, s):
    return np.matmul(g, _swap(v[1])), np.matmul(_swap(v[0]), g)


def _f_silu(v):
    sig = T.sigmoid(v[0])
    return v[0] * sig, {"sig": sig}


def _b_silu(g, v, out, s):
    sig = s["sig"]
    return (g * (sig + v[0] * sig * (1.0 - sig)),)


def _f_sigmoid(v):
    return T.sigmoid(v[0]), {}


def _b_sigmoid(g, v, out, s):
    return (g * out * (1.0 - out),)


def _f_exp(v):
    return np.exp(v[0]), {}


def _b_exp(g, v, out, s):
    return (g * out,)


def _f_sum(v, axis=None, keepdims=False):
    if axis is None:
        return np.asarray(v[0].sum(), dtype=v[0].dtype).reshape(1), {}
    return v[0].sum(axis=axis, keepdims=keepdims), {}


def _b_sum(g, v, out, s, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, v[0].shape, axis, keepdims)),)


def _f_mean(v, axis=None, keepdims=False):
    out, _ = _f_sum(v, axis, keepdims)
    count = v[0].size if axis is None else np.prod([v[0].shape[a] for a in np.atleast_1d(axis)])
    return out / count, {"count": count}


def _b_mean(g, v, out, s, axis=None, keepdims=False):
    return (np.array(_expand_reduced(g, v[0].shape, axis, keepdims)) / s["count"],)


def _f_reshape(v, shape):
    return v[0].reshape(shape), {}


def _b_reshape(g, v, out, s, shape):
    return (g.reshape(v[0].shape),)


def _f_transpose(v, axes):
    return np.ascontiguousarray(np.transpose(v[0], axes)), {}


def _b_transpose(g, v, out, s, axes):
    return (np.transpose(g, np.argsort(axes)),)


def _f_broadcast_to(v, shape):
    return T.broadcast_to(v[0], shape), {}


def _b_broadcast_to(g, v, out, s, shape):
    return (_unbroadcast(g, v[0].shape),)


def _f_softmax_rows(v, causal=False):
    return T.softmax_rows(v[0], causal=causal), {}


def _b_softmax_rows(g, v, out, s, causal=False):
    return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


def _f_rmsnorm(v, eps):
    x, w = v
    r = 1.0 / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps)
    return x * r * w, {"r": r}


def _b_rmsnorm(g, v, out, s, eps):
    x, w = v
    r = s["r"]
    gw = g * w
    d = x.shape[-1]
    gx = r * gw - (r ** 3) * x * (gw * x).sum(axis=-1, keepdims=True) / d
    gwt = (g * x * r).reshape(-1, d).sum(axis=0)
    return gx, gwt


def _f_segprod(v):
    return T.segprod(v[0]), {}


def _b_segprod(g, v, out, s):
    # d out[i,j] / d log a[k] = out[i,j] for j < k <= i
    w = g * out
    q = np.flip(np.cumsum(np.flip(w, axis=-2), axis=-2), axis=-2)  # q[k, j] = sum_{i>=k} w[i, j]
    strict = np.tril(np.ones(out.shape[-2:], dtype=bool), k=-1)
    dlog = np.where(strict, q, 0.0).sum(axis=-1)
    return (dlog / v[0],)


def _f_gather(v):
    table, ids = v
    return table[ids.astype(np.intp)], {}


def _b_gather(g, v, out, s):
    table, ids = v
    gt = np.zeros_like(table)
    np.add.at(gt, ids.astype(np.intp).ravel(), g.reshape(-1, table.shape[-1]))
    return gt, None


def _f_cross_entropy(v):
    logits, target = v
    if logits.shape != target.shape or logits.ndim != 2:
        raise T.DimensionError(f"cross_entropy: logits {logits.shape} vs target {target.shape}")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    loss = -(target * logp).sum() / logits.shape[0]
    return np.asarray(loss, dtype=logits.dtype).reshape(1), {"p": np.exp(logp)}


def _b_cross_entropy(g, v, out, s):
    logits, target = v
    return g.reshape(()) * (s["p"] - target) / logits.shape[0], None


_OPS = {
    "add": (_f_add, _b_add),
    "mul": (_f_mul, _b_mul),
    "matmul": (_f_matmul, _b_matmul),
    "silu": (_f_silu, _b_silu),
    "sigmoid": (_f_sigmoid, _b_sigmoid),
    "exp": (_f_exp, _b_exp),
    "sum": (_f_sum, _b_sum),
    "mean": (_f_mean, _b_mean),
    "reshape": (_f_reshape, _b_reshape),
    "transpose": (_f_transpose, _b_transpose),
    "broadcast_to": (_f_broadcast_to, _b_broadcast_to),
    "softmax_rows": (_f_softmax_rows, _b_softmax_rows),
    "rmsnorm": (_f_rmsnorm, _b_rmsnorm),
    "segprod": (_f_segprod, _b_segprod),
    "gather": (_f_gather, _b_gather),
    "cross_entropy": (_f_cross_entropy, _b_cross_entropy),
}

SUPPORTED_OPS = frozenset(_OPS)


class Tape:
    """Append-only record of eagerly evaluated ops."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.trainable: set[int] = set()
        self.names: dict[int, str] = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, trainable: bool = False, name: str | None = None) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), np.asarray(value)))
        if trainable:
            self.trainable.add(nid)
        if name is not None:
            self.names[nid] = name
        return nid

    def const(self, value) -> int:
        return self.leaf(value)

    def record(self, op: str, inputs, **attrs) -> int:
        if op not in _OPS:
            raise UnsupportedOpError(f"unsupported op {op!r}")
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} is not on the tape")
        forward, _ = _OPS[op]
        out, saved = forward([self.nodes[i].value for i in inputs], **attrs)
        self.nodes.append(Node(op, inputs, out, attrs, saved))
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def shape(self, nid: int) -> tuple[int, ...]:
        return self.nodes[nid].value.shape

    # sugar over record()
    def add(self, a, b):
        return self.record("add", (a, b))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def silu(self, a):
        return self.record("silu", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def exp(self, a):
        return self.record("exp", (a,))

    def sum(self, a, axis=None, keepdims=False):
        return self.record("sum", (a,), axis=axis, keepdims=keepdims)

    def mean(self, a, axis=None, keepdims=False):
        return self.record("mean", (a,), axis=axis, keepdims=keepdims)

    def reshape(self, a, shape):
        return self.record("reshape", (a,), shape=tuple(shape))

    def transpose(self, a, axes):
        return self.record("transpose", (a,), axes=tuple(axes))

    def broadcast_to(self, a, shape):
        return self.record("broadcast_to", (a,), shape=tuple(shape))

    def softmax_rows(self, a, causal=False):
        return self.record("softmax_rows", (a,), causal=causal)

    def rmsnorm(self, x, w, eps):
        return self.record("rmsnorm", (x, w), eps=eps)

    def segprod(self, a):
        return self.record("segprod", (a,))

    def gather(self, table, ids):
        return self.record("gather", (table, self.const(np.asarray(ids))))

    def cross_entropy(self, logits, target_probs):
        return self.record("cross_entropy", (logits, self.const(target_probs)))

    # composites
    def scale(self, a, c: float):
        v = self.value(a)
        return self.mul(a, self.const(np.full(v.shape, c, dtype=v.dtype)))

    def sub(self, a, b):
        return self.add(a, self.scale(b, -1.0))

    def linear(self, x, w):
        """``x @ w.T`` for x (..., in) and w (out, in)."""
        shape = self.shape(x)
        x2 = self.reshape(x, (-1, shape[-1])) if len(shape) != 2 else x
        y = self.matmul(x2, self.transpose(w, (1, 0)))
        if len(shape) != 2:
            y = self.reshape(y, shape[:-1] + (self.shape(w)[0],))
        return y

    def add_bias(self, x, b):
        return self.add(x, self.broadcast_to(b, self.shape(x)))


def backward(tape: Tape, loss: int) -> GradMap:
    """Gradients of the scalar node ``loss`` for every trainable leaf."""
    lv = tape.value(loss)
    if lv.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {lv.shape}")
    grads: list = [None] * (loss + 1)
    grads[loss] = np.ones_like(lv)
    for nid in range(loss, -1, -1):
        g = grads[nid]
        node = tape.nodes[nid]
        if g is None or node.op == "leaf":
            continue
        _, rule = _OPS[node.op]
        vals = [tape.nodes[i].value for i in node.inputs]
        for i, gi in zip(node.inputs, rule(g, vals, node.value, node.saved, **node.attrs)):
            if gi is None:
                continue
            grads[i] = gi if grads[i] is None else grads[i] + gi
    out = GradMap()
    for nid in sorted(tape.trainable):
        g = grads[nid] if nid <= loss else None
        v = tape.value(nid)
        out[nid] = np.zeros_like(v) if g is None else np.asarray(g, dtype=v.dtype).reshape(v.shape)
    return out
