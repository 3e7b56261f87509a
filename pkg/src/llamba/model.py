"""Llamba language model, plus the small attention teacher used for distillation.

Parameters live in flat ``name -> array`` dicts so the file format and the
optimizer can treat every model uniformly. Linear weights are stored
(out_features, in_features) and may be :class:`~llamba.quant.QuantTensor`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import mixer as mx
from .quant import QuantTensor, linear
from .tensor import DimensionError, silu, softmax_rows


@dataclass(frozen=True)
class LlambaConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    head_dim: int
    state_dim: int
    mlp_hidden: int
    vocab: int = 258
    norm_eps: float = 1e-5
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("d_model", "n_heads", "head_dim", "state_dim", "mlp_hidden", "vocab"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must be >= 0")

    def toy(self, n_blocks=1, vocab=258, mlp_hidden=None) -> "LlambaConfig":
        """Same mixer geometry at reduced depth / vocabulary / MLP width."""
        return dataclasses.replace(self, n_blocks=n_blocks, vocab=vocab,
                                   mlp_hidden=mlp_hidden or self.mlp_hidden)


# (n_blocks, d_model, n_heads, head_dim, state_dim) of the released models; MLP
# width and vocabulary follow the Llama-3.x teachers.
PRESETS = {
    "1b": LlambaConfig(16, 2048, 32, 64, 64, mlp_hidden=8192, vocab=128256),
    "3b": LlambaConfig(28, 3072, 32, 96, 64, mlp_hidden=8192, vocab=128256),
    "8b": LlambaConfig(32, 4096, 32, 128, 64, mlp_hidden=14336, vocab=128256),
}


@dataclass(frozen=True)
class TeacherConfig:
    n_blocks: int
    d_model: int
    n_heads: int
    head_dim: int
    mlp_hidden: int
    n_kv_heads: int = 0   # 0 -> same as n_heads
    vocab: int = 258
    norm_eps: float = 1e-5
    tie_embeddings: bool = False
    # fixed per-head linear recency penalty on attention scores (empty = none)
    recency_slopes: tuple = ()

    def __post_init__(self):
        if self.n_kv_heads == 0:
            object.__setattr__(self, "n_kv_heads", self.n_heads)
        if self.n_heads % self.n_kv_heads:
            raise ValueError("n_kv_heads must divide n_heads")
        if self.recency_slopes and len(self.recency_slopes) != self.n_heads:
            raise ValueError("need one recency slope per head")
        object.__setattr__(self, "recency_slopes", tuple(float(s) for s in self.recency_slopes))


def config_to_text(cfg) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        out[f.name] = ",".join(repr(x) for x in v) if isinstance(v, tuple) else str(v)
    return out


def config_from_text(cls, kv: dict[str, str]):
    args = {}
    for f in dataclasses.fields(cls):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        default = f.default
        if isinstance(default, bool):
            args[f.name] = raw.strip().lower() in ("1", "true", "yes")
        elif isinstance(default, tuple):
            args[f.name] = tuple(float(s) for s in raw.split(",") if s.strip())
        elif isinstance(default, float):
            args[f.name] = float(raw)
        else:
            args[f.name] = int(raw)
    return cls(**args)


def rmsnorm(x, weight, eps=1e-5):
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x)
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * weight


def gated_mlp(x, gate, up, down):
    """down(SiLU(gate x) * (up x))."""
    return linear(silu(linear(x, gate)) * linear(x, up), down)


def _mlp(params, prefix, x):
    return gated_mlp(x, params[prefix + "mlp.gate"], params[prefix + "mlp.up"],
                     params[prefix + "mlp.down"])


def _embed(params, cfg, tokens):
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ValueError(f"token id out of range for vocab {cfg.vocab}")
    return params["embed"][tokens]


def _head(params, cfg):
    return params["embed"] if cfg.tie_embeddings else params["head"]


def _logits(params, cfg, h):
    return linear(rmsnorm(h, params["norm_f"], cfg.norm_eps), _head(params, cfg))


@dataclass
class ForwardResult:
    logits: np.ndarray
    hidden_states: list = field(default_factory=list)   # block inputs, then final output
    mixer_matrices: list = field(default_factory=list)  # per layer (H, T, T)
    mixer_inputs: list = field(default_factory=list)    # normed inputs to each mixer
    mixer_outputs: list = field(default_factory=list)   # mixer sub-layer outputs
    attention: np.ndarray | None = None                 # teacher only: (L, H, T, T)


@dataclass
class LlambaModel:
    config: LlambaConfig
    params: dict

    @property
    def dtype(self):
        return self.params["norm_f"].dtype

    def mixer(self, i: int) -> mx.MixerParams:
        c = self.config
        return mx.MixerParams.from_dict(self.params, c.n_heads, c.head_dim, c.state_dim,
                                        prefix=f"blocks.{i}.mixer.")

    def init_state(self, batch: int = 1) -> list[mx.RecurrentState]:
        return [mx.RecurrentState.zeros(self.mixer(i), batch) for i in range(self.config.n_blocks)]

    def state_nbytes(self, states) -> int:
        return sum(s.nbytes for s in states)

    @property
    def is_quantized(self) -> bool:
        return any(isinstance(v, QuantTensor) for v in self.params.values())

    def copy(self) -> "LlambaModel":
        return LlambaModel(self.config, {k: (v.copy() if isinstance(v, np.ndarray) else v)
                                         for k, v in self.params.items()})


@dataclass
class TeacherModel:
    config: TeacherConfig
    params: dict

    @property
    def dtype(self):
        return self.params["norm_f"].dtype


def init_student(config: LlambaConfig, seed=0, identity=True, dtype=np.float32) -> LlambaModel:
    rng = np.random.default_rng(seed)
    c = config
    d, m = c.d_model, c.mlp_hidden
    p = {"embed": rng.standard_normal((c.vocab, d))}
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        p[pre + "norm1"] = np.ones(d)
        mixer = mx.init_mixer(d, c.n_heads, c.head_dim, c.state_dim, rng, identity=identity)
        for k, v in mixer.arrays().items():
            p[pre + "mixer." + k] = v
        p[pre + "norm2"] = np.ones(d)
        p.update(_init_mlp(rng, pre, d, m))
    p["norm_f"] = np.ones(d)
    if not c.tie_embeddings:
        p["head"] = rng.standard_normal((c.vocab, d)) / np.sqrt(d)
    return LlambaModel(c, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()})


def _init_mlp(rng, pre, d, m):
    return {
        pre + "mlp.gate": rng.standard_normal((m, d)) / np.sqrt(d),
        pre + "mlp.up": rng.standard_normal((m, d)) / np.sqrt(d),
        pre + "mlp.down": rng.standard_normal((d, m)) * 0.5 / np.sqrt(m),
    }


def init_teacher(config: TeacherConfig, seed=0, dtype=np.float32) -> TeacherModel:
    rng = np.random.default_rng(seed)
    c = config
    d, m, hd = c.d_model, c.mlp_hidden, c.head_dim
    p = {"embed": rng.standard_normal((c.vocab, d))}
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        p[pre + "norm1"] = np.ones(d)
        p[pre + "attn.W_q"] = rng.standard_normal((c.n_heads * hd, d)) / np.sqrt(d)
        p[pre + "attn.W_k"] = rng.standard_normal((c.n_kv_heads * hd, d)) / np.sqrt(d)
        p[pre + "attn.W_v"] = rng.standard_normal((c.n_kv_heads * hd, d)) / np.sqrt(d)
        p[pre + "attn.W_o"] = rng.standard_normal((d, c.n_heads * hd)) / np.sqrt(c.n_heads * hd)
        p[pre + "norm2"] = np.ones(d)
        p.update(_init_mlp(rng, pre, d, m))
    p["norm_f"] = np.ones(d)
    if not c.tie_embeddings:
        p["head"] = rng.standard_normal((c.vocab, d)) / np.sqrt(d)
    return TeacherModel(c, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()})


def _batched_tokens(tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        return tokens[None], True
    if tokens.ndim == 2:
        return tokens, False
    raise DimensionError(f"tokens must be (T,) or (batch, T), got {tokens.shape}")


def student_forward(model: LlambaModel, tokens, capture=(), chunk: int = 64,
                    return_state: bool = False):
    """Full-sequence forward: embed -> blocks -> final norm -> head.

    ``capture`` may contain "hidden_states" and/or "mixer_matrices".
    Returns a :class:`ForwardResult` (and the per-block decode states when
    ``return_state`` is set, so decoding can continue from the prompt).
    """
    capture = set(capture)
    toks, single = _batched_tokens(tokens)
    if toks.shape[1] == 0:
        raise ValueError("empty token sequence")
    c = model.config
    p = model.params
    h = _embed(p, c, toks).astype(model.dtype, copy=False)
    res = ForwardResult(logits=None)
    states = []
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        if "hidden_states" in capture:
            res.hidden_states.append(h)
        mp = model.mixer(i)
        u = rmsnorm(h, p[pre + "norm1"], c.norm_eps)
        if "mixer_matrices" in capture:
            res.mixer_matrices.append(mx.materialize_mixer(mx.project_inputs(mp, u)))
        if return_state:
            mo, st = mx.forward_parallel(mp, u, chunk=chunk, return_state=True)
            states.append(st)
        else:
            mo = mx.forward_parallel(mp, u, chunk=chunk)
        if "hidden_states" in capture:
            res.mixer_inputs.append(u)
            res.mixer_outputs.append(mo)
        h = h + mo
        h = h + _mlp(p, pre, rmsnorm(h, p[pre + "norm2"], c.norm_eps))
    if "hidden_states" in capture:
        res.hidden_states.append(h)
    res.logits = _logits(p, c, h)
    if single:
        res.logits = res.logits[0]
        res.hidden_states = [x[0] for x in res.hidden_states]
        res.mixer_matrices = [x[0] for x in res.mixer_matrices]
        res.mixer_inputs = [x[0] for x in res.mixer_inputs]
        res.mixer_outputs = [x[0] for x in res.mixer_outputs]
    if return_state:
        return res, states
    return res


def decode(model: LlambaModel, states, next_token):
    """One recurrent step through every block.

    ``next_token`` is an int or a (batch,) array matching the states' batch.
    Returns (logits, new_states); logits are (V,) or (batch, V).
    """
    c = model.config
    if len(states) != c.n_blocks:
        raise ValueError(f"got {len(states)} states for {c.n_blocks} blocks")
    tok = np.asarray(next_token)
    single = tok.ndim == 0
    tok = tok.reshape(-1)
    p = model.params
    h = _embed(p, c, tok).astype(model.dtype, copy=False)
    new_states = []
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        st, mo = mx.recurrent_step(model.mixer(i), states[i],
                                   rmsnorm(h, p[pre + "norm1"], c.norm_eps))
        new_states.append(st)
        h = h + mo
        h = h + _mlp(p, pre, rmsnorm(h, p[pre + "norm2"], c.norm_eps))
    logits = _logits(p, c, h)
    return (logits[0] if single else logits), new_states


def sample(logits, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = np.exp(z - z.max())
    return int(rng.choice(z.size, p=z / z.sum()))


def generate(model: LlambaModel, prompt, max_tokens: int, temperature: float = 0.0,
             seed: int = 0, eos: int | None = None):
    """Prefill the prompt with the chunked path, then decode token by token."""
    rng = np.random.default_rng(seed)
    out: list[int] = []
    if max_tokens <= 0:
        return out
    prompt = list(prompt)
    if not prompt:
        raise ValueError("prompt must contain at least one token")
    res, states = student_forward(model, prompt, return_state=True)
    logits = res.logits[-1]
    for _ in range(max_tokens):
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite logits during generation")
        tok = sample(logits, temperature, rng)
        out.append(tok)
        if eos is not None and tok == eos:
            break
        logits, states = decode(model, states, tok)
    return out


# ---------------------------------------------------------------- teacher

def _recency_bias(cfg: TeacherConfig, t: int, dtype):
    if not cfg.recency_slopes:
        return None
    dist = np.arange(t)[:, None] - np.arange(t)[None, :]
    slopes = np.asarray(cfg.recency_slopes)[:, None, None]
    return (-slopes * np.maximum(dist, 0)).astype(dtype)


def attention(cfg: TeacherConfig, p, pre, u):
    """Causal softmax attention over (batch, T, d); returns (out, probs)."""
    nb, nt, _ = u.shape
    H, Hk, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    q = linear(u, p[pre + "attn.W_q"]).reshape(nb, nt, H, hd).transpose(0, 2, 1, 3)
    k = linear(u, p[pre + "attn.W_k"]).reshape(nb, nt, Hk, hd).transpose(0, 2, 1, 3)
    v = linear(u, p[pre + "attn.W_v"]).reshape(nb, nt, Hk, hd).transpose(0, 2, 1, 3)
    k = np.repeat(k, H // Hk, axis=1)
    v = np.repeat(v, H // Hk, axis=1)
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(hd)
    bias = _recency_bias(cfg, nt, scores.dtype)
    if bias is not None:
        scores = scores + bias
    probs = softmax_rows(scores, causal=True)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(nb, nt, H * hd)
    return linear(ctx, p[pre + "attn.W_o"]), probs


def teacher_forward(teacher: TeacherModel, tokens, capture=()) -> ForwardResult:
    """Teacher forward. Attention matrices (post-softmax, causal) are always
    returned: (L, H, T, T) for one sequence, (batch, L, H, T, T) for a batch."""
    capture = set(capture)
    toks, single = _batched_tokens(tokens)
    c = teacher.config
    p = teacher.params
    h = _embed(p, c, toks).astype(teacher.dtype, copy=False)
    res = ForwardResult(logits=None)
    attn = []
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        if "hidden_states" in capture:
            res.hidden_states.append(h)
        u = rmsnorm(h, p[pre + "norm1"], c.norm_eps)
        ao, probs = attention(c, p, pre, u)
        attn.append(probs)
        if "hidden_states" in capture:
            res.mixer_inputs.append(u)
            res.mixer_outputs.append(ao)
        h = h + ao
        h = h + _mlp(p, pre, rmsnorm(h, p[pre + "norm2"], c.norm_eps))
    if "hidden_states" in capture:
        res.hidden_states.append(h)
    res.logits = _logits(p, c, h)
    nb, nt = toks.shape
    res.attention = (np.stack(attn, axis=1) if attn
                     else np.zeros((nb, 0, c.n_heads, nt, nt), dtype=teacher.dtype))
    if single:
        res.logits = res.logits[0]
        res.attention = res.attention[0]
        for name in ("hidden_states", "mixer_inputs", "mixer_outputs"):
            setattr(res, name, [x[0] for x in getattr(res, name)])
    return res


class KVCache:
    """Growing key/value cache for the attention baseline.

    Capacity is preallocated; ``nbytes`` counts only the filled positions,
    i.e. ``2 * L * batch * H_kv * head_dim * t * itemsize``.
    """

    def __init__(self, cfg: TeacherConfig, batch: int, capacity: int, dtype=np.float32):
        shape = (batch, cfg.n_kv_heads, capacity, cfg.head_dim)
        self.k = [np.zeros(shape, dtype=dtype) for _ in range(cfg.n_blocks)]
        self.v = [np.zeros(shape, dtype=dtype) for _ in range(cfg.n_blocks)]
        self.length = 0
        self.capacity = capacity
        self.cfg = cfg

    @property
    def nbytes(self) -> int:
        c = self.cfg
        if not self.k:
            return 0
        item = self.k[0].dtype.itemsize
        return 2 * c.n_blocks * self.k[0].shape[0] * c.n_kv_heads * c.head_dim * self.length * item


def kv_cache_nbytes(cfg: TeacherConfig, t: int, batch: int = 1, dtype=np.float32) -> int:
    return 2 * cfg.n_blocks * batch * cfg.n_kv_heads * cfg.head_dim * t * np.dtype(dtype).itemsize


def teacher_prefill(teacher: TeacherModel, tokens, capacity: int):
    """Run the prompt and fill a KV cache; returns (last logits, cache)."""
    toks, _ = _batched_tokens(tokens)
    c = teacher.config
    p = teacher.params
    nb, nt = toks.shape
    cache = KVCache(c, nb, capacity, teacher.dtype)
    h = _embed(p, c, toks).astype(teacher.dtype, copy=False)
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        u = rmsnorm(h, p[pre + "norm1"], c.norm_eps)
        k = linear(u, p[pre + "attn.W_k"]).reshape(nb, nt, c.n_kv_heads, c.head_dim)
        v = linear(u, p[pre + "attn.W_v"]).reshape(nb, nt, c.n_kv_heads, c.head_dim)
        cache.k[i][:, :, :nt] = k.transpose(0, 2, 1, 3)
        cache.v[i][:, :, :nt] = v.transpose(0, 2, 1, 3)
        ao, _ = attention(c, p, pre, u)
        h = h + ao
        h = h + _mlp(p, pre, rmsnorm(h, p[pre + "norm2"], c.norm_eps))
    cache.length = nt
    return _logits(p, c, h[:, -1]), cache


def teacher_decode(teacher: TeacherModel, cache: KVCache, next_token):
    """One KV-cached attention step; returns logits (batch, V)."""
    c = teacher.config
    p = teacher.params
    tok = np.asarray(next_token).reshape(-1)
    nb = tok.size
    if cache.length >= cache.capacity:
        raise MemoryError("KV cache capacity exhausted")
    t = cache.length
    H, Hk, hd = c.n_heads, c.n_kv_heads, c.head_dim
    h = _embed(p, c, tok).astype(teacher.dtype, copy=False)
    for i in range(c.n_blocks):
        pre = f"blocks.{i}."
        u = rmsnorm(h, p[pre + "norm1"], c.norm_eps)
        q = linear(u, p[pre + "attn.W_q"]).reshape(nb, Hk, H // Hk, hd)
        cache.k[i][:, :, t] = linear(u, p[pre + "attn.W_k"]).reshape(nb, Hk, hd)
        cache.v[i][:, :, t] = linear(u, p[pre + "attn.W_v"]).reshape(nb, Hk, hd)
        keys = cache.k[i][:, :, :t + 1]                     # (b, Hk, t+1, hd)
        scores = q @ np.swapaxes(keys, -1, -2) / np.sqrt(hd)  # (b, Hk, g, t+1)
        if c.recency_slopes:
            slopes = np.asarray(c.recency_slopes, dtype=scores.dtype).reshape(Hk, H // Hk, 1)
            scores = scores - slopes * (t - np.arange(t + 1, dtype=scores.dtype))
        scores = scores - scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        ctx = (w @ cache.v[i][:, :, :t + 1]).reshape(nb, H * hd)
        h = h + linear(ctx, p[pre + "attn.W_o"])
        h = h + _mlp(p, pre, rmsnorm(h, p[pre + "norm2"], c.norm_eps))
    cache.length = t + 1
    return _logits(p, c, h)


def param_count(params) -> int:
    return sum(int(np.prod(v.shape)) for v in params.values())
