"""Decode throughput and memory: recurrent student vs a KV-cached attention baseline."""

from __future__ import annotations

import csv
import dataclasses
import resource
import time

import numpy as np

from .model import (KVCache, LlambaModel, TeacherConfig, TeacherModel, decode, init_teacher,
                    kv_cache_nbytes, param_count, student_forward, teacher_decode)

OOM = "OOM"
COLUMNS = ("model", "context", "batch", "tokens_per_sec", "latency_ms", "state_bytes", "peak_rss_bytes")
DEFAULT_CONTEXTS = (64, 256, 1024, 4096)
DEFAULT_BATCHES = (1, 8, 32)


def peak_rss_bytes() -> int:
    # ru_maxrss is KiB on Linux
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


def matched_baseline(student: LlambaModel, seed: int = 0) -> TeacherModel:
    """Attention model with the student's width/depth, MLP widened to match its parameter count."""
    c = student.config
    cfg = TeacherConfig(n_blocks=c.n_blocks, d_model=c.d_model, n_heads=c.n_heads,
                        head_dim=c.head_dim, mlp_hidden=c.mlp_hidden, vocab=c.vocab,
                        tie_embeddings=c.tie_embeddings)
    if c.n_blocks:
        probe = init_teacher(cfg, seed=seed)
        gap = param_count(student.params) - param_count(probe.params)
        extra = int(round(gap / (3 * c.d_model * c.n_blocks)))
        cfg = dataclasses.replace(cfg, mlp_hidden=max(1, c.mlp_hidden + extra))
    return init_teacher(cfg, seed=seed, dtype=student.dtype)


@dataclasses.dataclass
class Cell:
    model: str
    context: int
    batch: int
    tokens_per_sec: float | str
    latency_ms: float | str
    state_bytes: int | str
    peak_rss_bytes: int

    def row(self):
        return [getattr(self, c) for c in COLUMNS]


def _time_decode(step, n_tokens, repeats, warmup=3):
    """Best-of-``repeats`` seconds per decode step, each repeat timing ``n_tokens`` steps."""
    for _ in range(warmup):
        step()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(n_tokens):
            step()
        times.append((time.perf_counter() - t0) / n_tokens)
    return min(times)


def bench_student(model: LlambaModel, context: int, batch: int, n_tokens: int = 16,
                  repeats: int = 5, seed: int = 0, mem_limit: int | None = None) -> Cell:
    """Prefill ``context`` tokens, then time decode steps from that state."""
    rng = np.random.default_rng(seed)
    need = model.state_nbytes(model.init_state(batch))
    if mem_limit is not None and need > mem_limit:
        return Cell("student", context, batch, OOM, OOM, OOM, peak_rss_bytes())
    try:
        prompt = rng.integers(0, model.config.vocab, (batch, context))
        _, states = student_forward(model, prompt, return_state=True)
        tok = rng.integers(0, model.config.vocab, batch)
        box = {"states": states}

        def step():
            # state is not advanced between timed steps: position stays at ``context``
            decode(model, box["states"], tok)

        dt = _time_decode(step, n_tokens, repeats)
        state_bytes = model.state_nbytes(states)
    except MemoryError:
        return Cell("student", context, batch, OOM, OOM, OOM, peak_rss_bytes())
    return Cell("student", context, batch, batch / dt, dt * 1e3, state_bytes, peak_rss_bytes())


def bench_attention(model: TeacherModel, context: int, batch: int, n_tokens: int = 16,
                    repeats: int = 5, seed: int = 0, mem_limit: int | None = None) -> Cell:
    """Prefill a KV cache to ``context`` tokens, then time decode steps at that length."""
    rng = np.random.default_rng(seed)
    capacity = context + 1
    need = kv_cache_nbytes(model.config, capacity, batch, model.dtype)
    if mem_limit is not None and need > mem_limit:
        return Cell("attention", context, batch, OOM, OOM, OOM, peak_rss_bytes())
    try:
        # decode cost depends only on the cache length, so the cache is filled
        # with random keys/values instead of a quadratic-memory prefill
        cache = KVCache(model.config, batch, capacity, model.dtype)
        for k, v in zip(cache.k, cache.v):
            k[:, :, :context] = rng.standard_normal(k[:, :, :context].shape)
            v[:, :, :context] = rng.standard_normal(v[:, :, :context].shape)
        cache.length = context
        tok = rng.integers(0, model.config.vocab, batch)
        state_bytes = cache.nbytes

        def step():
            # decode at position ``context`` and roll back, so every step sees the same length
            teacher_decode(model, cache, tok)
            cache.length = context

        dt = _time_decode(step, n_tokens, repeats)
    except MemoryError:
        return Cell("attention", context, batch, OOM, OOM, OOM, peak_rss_bytes())
    return Cell("attention", context, batch, batch / dt, dt * 1e3, state_bytes, peak_rss_bytes())


def run_grid(student: LlambaModel, baseline: TeacherModel | None, contexts=DEFAULT_CONTEXTS,
             batches=DEFAULT_BATCHES, n_tokens: int = 16, repeats: int = 5,
             mem_limit: int | None = None) -> list[Cell]:
    cells = []
    for batch in batches:
        for ctx in contexts:
            cells.append(bench_student(student, ctx, batch, n_tokens, repeats, mem_limit=mem_limit))
            if baseline is not None:
                cells.append(bench_attention(baseline, ctx, batch, n_tokens, repeats,
                                             mem_limit=mem_limit))
    return cells


def write_csv(cells, path_or_file) -> None:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for c in cells:
            w.writerow([repr(v) if isinstance(v, float) else v for v in c.row()])
    finally:
        if own:
            fh.close()


def read_csv(path) -> list[dict]:
    """Parse a bench CSV; numeric cells become numbers, the OOM sentinel stays a string."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {}
            for k, v in row.items():
                if k == "model" or v == OOM:
                    parsed[k] = v
                elif k in ("tokens_per_sec", "latency_ms"):
                    parsed[k] = float(v)
                else:
                    parsed[k] = int(v)
            out.append(parsed)
    return out
