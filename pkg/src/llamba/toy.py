"""Hermetic toy task: a fixed-seed Markov corpus and a small attention teacher.

Everything the acceptance runs need is generated from integer seeds, so
results do not depend on downloaded data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import graph
from .autodiff import Tape, backward
from .model import LlambaConfig, TeacherConfig, TeacherModel, init_teacher

log = logging.getLogger(__name__)

VOCAB = 256
SEQ_LEN = 32
TEACHER_FILE = "toy_teacher.lmba"
STUDENT_FILE = "toy_student.lmba"

# 800 steps split 30:270:500, close to the 300M:2.7B:5B token ratio. Learning
# rates are raised well above the large-model values so the toy runs converge
# within a few hundred steps.
DISTILL_CONFIG = """\
seq_len=32
seed=0
dtype=float64
stage1.steps=30
stage1.batch_size=8
stage1.peak_lr=1e-2
stage2.steps=270
stage2.batch_size=8
stage2.peak_lr=3e-3
stage3.steps=500
stage3.batch_size=8
stage3.peak_lr=3e-3
"""

TOY_TEACHER = TeacherConfig(n_blocks=2, d_model=32, n_heads=2, head_dim=16, mlp_hidden=64,
                            vocab=VOCAB, recency_slopes=(1.0, 0.5))
TOY_STUDENT = LlambaConfig(n_blocks=2, d_model=32, n_heads=2, head_dim=16, state_dim=64,
                           mlp_hidden=64, vocab=VOCAB)


@dataclass(frozen=True)
class MarkovCorpus:
    """Second-order chain over ``vocab`` symbols.

    Each symbol has ``branching`` successors with geometric weights; which
    successor gets the largest weight rotates with the symbol two steps
    back, so predicting well needs more than the current token.
    """

    vocab: int = VOCAB
    branching: int = 4
    seed: int = 0

    def table(self):
        rng = np.random.default_rng([self.seed, 1])
        succ = np.stack([rng.choice(self.vocab, self.branching, replace=False)
                         for _ in range(self.vocab)])
        w = 0.5 ** np.arange(self.branching)
        return succ, w / w.sum()

    def sample(self, n_seqs: int, seq_len: int, rng: np.random.Generator):
        succ, probs = self.table()
        out = np.empty((n_seqs, seq_len), dtype=np.int64)
        out[:, :2] = rng.integers(0, self.vocab, (n_seqs, 2))
        ranks = rng.choice(self.branching, size=(n_seqs, seq_len), p=probs)
        for t in range(2, seq_len):
            pick = (ranks[:, t] + out[:, t - 2]) % self.branching
            out[:, t] = succ[out[:, t - 1], pick]
        return out

    def batch(self, step: int, batch_size: int, seq_len: int = SEQ_LEN, stream_seed: int = 0):
        """Batch number ``step`` of a stream; depends only on its arguments."""
        return self.sample(batch_size, seq_len, np.random.default_rng([self.seed, stream_seed, step]))

    def stream(self, batch_size: int, seq_len: int = SEQ_LEN, stream_seed: int = 0, start: int = 0):
        step = start
        while True:
            yield self.batch(step, batch_size, seq_len, stream_seed)
            step += 1

    def entropy_rate(self) -> float:
        _, p = self.table()
        return float(-(p * np.log(p)).sum())


def eval_tokens(n_seqs: int = 32, seq_len: int = SEQ_LEN, corpus: MarkovCorpus | None = None):
    """Held-out sequences (a stream seed no training run uses)."""
    corpus = corpus or MarkovCorpus()
    return corpus.batch(0, n_seqs, seq_len, stream_seed=999)


def stage_stream(plan, seed: int = 0, start: int = 0, corpus: MarkovCorpus | None = None):
    """Training batches for one stage; each (seed, stage) pair has its own stream."""
    corpus = corpus or MarkovCorpus()
    return corpus.stream(plan.batch_size, plan.seq_len, stream_seed=10 * seed + plan.stage,
                         start=start)


def train_teacher(config: TeacherConfig = TOY_TEACHER, steps: int = 4000, batch_size: int = 32,
                  seq_len: int = SEQ_LEN, lr: float = 1e-2, seed: int = 0,
                  corpus: MarkovCorpus | None = None) -> TeacherModel:
    """Fit the teacher to next-token prediction on the Markov corpus."""
    from .mohawk import OptimizerState, StagePlan, adamw_step, wsd_lr

    corpus = corpus or MarkovCorpus(vocab=config.vocab)
    teacher = init_teacher(config, seed=seed, dtype=np.float64)
    params = dict(teacher.params)
    opt = OptimizerState.fresh(params, params, weight_decay=0.0)
    plan = StagePlan(stage=3, token_budget=0, batch_size=batch_size, seq_len=seq_len,
                     peak_lr=lr, steps=steps, min_lr=lr * 0.01)
    for step in range(steps):
        toks = corpus.batch(step, batch_size, seq_len + 1, stream_seed=7)
        tape = Tape()
        pn = graph.bind(tape, params, params)
        logits, _ = graph.teacher(tape, pn, config, toks[:, :-1])
        loss = tape.cross_entropy(logits, graph.one_hot(toks[:, 1:], config.vocab, np.float64))
        grads = backward(tape, loss).named(tape)
        params, opt = adamw_step(params, grads, opt, wsd_lr(step, steps, plan))
        if step % 250 == 0:
            log.info("teacher step %d loss %.4f", step, tape.value(loss)[0])
    return TeacherModel(config, {k: v.astype(np.float32) for k, v in params.items()})


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("llamba") / "data" / name))


def bundled_teacher_path() -> Path:
    return bundled_path(TEACHER_FILE)


def bundled_student_path() -> Path:
    return bundled_path(STUDENT_FILE)


def load_toy_teacher(dtype=np.float64) -> TeacherModel:
    """The bundled toy teacher, trained and cached on first use if missing."""
    from . import io

    path = bundled_teacher_path()
    if not path.exists():
        log.warning("bundled teacher missing; training it (one-off)")
        io.save(train_teacher(), path)
    t = io.load(path)
    return TeacherModel(t.config, {k: np.asarray(v, dtype=dtype) for k, v in t.params.items()})
