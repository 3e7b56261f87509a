"""Three-stage attention-to-SSM distillation.

Stage 1 (matrix orientation) fits each student mixer's materialised matrix to
the teacher's attention matrix of the same layer. Stage 2 (hidden-state
alignment) fits each mixer's output to the teacher's attention output, both
fed the teacher's own normalised layer input. Stage 3 copies the teacher's
MLPs, norms, embedding and head into the student and trains everything on
the teacher's logits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Iterator

import numpy as np

from . import graph
from .autodiff import Tape, backward
from .mixer import MATRIX_PARAMS, forward_parallel, materialize_mixer, project_inputs
from .model import LlambaModel, TeacherModel, student_forward, teacher_forward

# Llamba-1B token split across the three stages (300M : 2.7B : 5B)
STAGE_TOKEN_RATIOS = (0.3, 2.7, 5.0)
STAGE_BATCH = {1: 64, 2: 128, 3: 128}
STAGE_PEAK_LR = {1: 1e-4, 2: 1e-4, 3: 5e-5}


class ConfigError(ValueError):
    pass


class AlignmentConfigError(ValueError):
    pass


class TransferError(ValueError):
    pass


class StageAbort(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


# ------------------------------------------------------------------ losses

def matrix_orientation_loss(student_M, teacher_A) -> float:
    """Mean over heads of ||M_h - A_h||_F^2 / T^2 (leading batch axes averaged too)."""
    student_M, teacher_A = np.asarray(student_M), np.asarray(teacher_A)
    if student_M.shape[:-2] != teacher_A.shape[:-2]:
        raise AlignmentConfigError(
            f"head layout mismatch: student {student_M.shape} vs teacher {teacher_A.shape}")
    if student_M.shape != teacher_A.shape:
        raise ValueError(f"matrix shape mismatch {student_M.shape} vs {teacher_A.shape}")
    return float(np.mean((student_M - teacher_A) ** 2))


def hidden_state_alignment_loss(student_out, teacher_out) -> float:
    """Mean over positions of ||s_t - t_t||^2 / d."""
    student_out, teacher_out = np.asarray(student_out), np.asarray(teacher_out)
    if student_out.shape != teacher_out.shape:
        raise ValueError(f"shape mismatch {student_out.shape} vs {teacher_out.shape}")
    return float(np.mean((student_out - teacher_out) ** 2))


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def kd_loss(student_logits, teacher_logits) -> float:
    """Mean over positions of CE(softmax(teacher), log_softmax(student)), temperature 1."""
    s, t = np.asarray(student_logits), np.asarray(teacher_logits)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    p = np.exp(log_softmax(t))
    return float(-(p * log_softmax(s)).sum(axis=-1).mean())


def kd_decomposition(student_logits, teacher_logits) -> tuple[float, float]:
    """(teacher entropy, KL(teacher || student)), both averaged over positions."""
    lt, ls = log_softmax(teacher_logits), log_softmax(student_logits)
    p = np.exp(lt)
    ent = float(-(p * lt).sum(axis=-1).mean())
    kl = float((p * (lt - ls)).sum(axis=-1).mean())
    return ent, kl


# --------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: dict, names: Iterable[str], **hyper) -> "OptimizerState":
        names = list(names)
        return cls({n: np.zeros_like(params[n]) for n in names},
                   {n: np.zeros_like(params[n]) for n in names}, **hyper)


def adamw_step(params: dict, grads: dict, opt: OptimizerState, lr: float):
    """One AdamW update with decoupled weight decay and bias-corrected moments.

    Only parameters with an optimizer slot are touched. Returns a new params
    dict (updated arrays are fresh objects) and the advanced optimizer state.
    """
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    b1, b2 = opt.beta1, opt.beta2
    t = opt.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params = dict(params)
    for name in opt.m:
        theta = params[name]
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = b1 * opt.m[name] + (1.0 - b1) * g
        v = b2 * opt.v[name] + (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + opt.eps) + opt.weight_decay * theta
        new_params[name] = (theta - lr * update).astype(theta.dtype, copy=False)
        opt.m[name] = m
        opt.v[name] = v
    opt.step = t
    return new_params, opt


# --------------------------------------------------------------- schedule

@dataclass
class StagePlan:
    stage: int
    token_budget: int
    batch_size: int
    seq_len: int
    peak_lr: float
    warmup_frac: float = 0.10
    decay_frac: float = 0.10
    min_lr: float = 1e-8
    steps: int | None = None   # explicit step count; overrides the token budget

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.warmup_frac < 0 or self.decay_frac < 0:
            raise ConfigError("warmup/decay fractions must be >= 0")
        if self.warmup_frac + self.decay_frac > 1.0:
            raise ConfigError("warmup_frac + decay_frac exceeds 1")

    @property
    def total_steps(self) -> int:
        if self.steps is not None:
            return int(self.steps)
        return max(1, self.token_budget // (self.batch_size * self.seq_len))


def default_plans(total_tokens: int, seq_len: int = 2048, batch_sizes=None,
                  peak_lrs=None) -> list[StagePlan]:
    """Stage plans with the 300M:2.7B:5B token split scaled to ``total_tokens``."""
    batch_sizes = batch_sizes or STAGE_BATCH
    peak_lrs = peak_lrs or STAGE_PEAK_LR
    total_ratio = sum(STAGE_TOKEN_RATIOS)
    return [StagePlan(stage=s, token_budget=int(round(total_tokens * r / total_ratio)),
                      batch_size=batch_sizes[s], seq_len=seq_len, peak_lr=peak_lrs[s])
            for s, r in zip((1, 2, 3), STAGE_TOKEN_RATIOS)]


def _exact(x) -> Fraction:
    # shortest decimal form, so 0.1 means one tenth and not the nearest double
    return Fraction(repr(float(x)))


def wsd_lr(step: int, total_steps: int, plan: StagePlan) -> float:
    """Warm-stable-decay: linear 0 -> peak, flat, then linear peak -> min_lr at the last step.

    Evaluated in exact rational arithmetic and rounded once, so phase
    boundaries never drift with float error and the last step is min_lr.
    """
    if plan.warmup_frac + plan.decay_frac > 1.0:
        raise ConfigError("warmup_frac + decay_frac exceeds 1")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    peak, low = _exact(plan.peak_lr), _exact(plan.min_lr)
    warm = _exact(plan.warmup_frac) * total_steps
    decay_start = total_steps - _exact(plan.decay_frac) * total_steps
    last = total_steps - 1
    if step < warm:
        return float(peak * step / warm)
    if step < decay_start or last <= decay_start:
        return float(peak)
    return float(peak + (low - peak) * (step - decay_start) / (last - decay_start))


# --------------------------------------------------------- weight transfer

def transferable_names(cfg) -> list[str]:
    names = ["embed", "norm_f"]
    if not cfg.tie_embeddings:
        names.append("head")
    for i in range(cfg.n_blocks):
        pre = f"blocks.{i}."
        names += [pre + "norm1", pre + "norm2", pre + "mlp.gate", pre + "mlp.up", pre + "mlp.down"]
    return names


def transfer_weights(teacher: TeacherModel, student: LlambaModel) -> LlambaModel:
    """Copy MLPs, norms, embedding and head from teacher to student; mixers untouched."""
    tc, sc = teacher.config, student.config
    problems = []
    for attr in ("d_model", "mlp_hidden", "vocab", "n_blocks", "tie_embeddings"):
        if getattr(tc, attr) != getattr(sc, attr):
            problems.append(f"{attr}: teacher {getattr(tc, attr)} vs student {getattr(sc, attr)}")
    if problems:
        raise TransferError("cannot transfer weights: " + "; ".join(problems))
    params = dict(student.params)
    for name in transferable_names(sc):
        src, dst = teacher.params[name], student.params[name]
        if src.shape != dst.shape:
            raise TransferError(f"tensor {name}: teacher {src.shape} vs student {dst.shape}")
        params[name] = np.array(src, dtype=dst.dtype, copy=True)
    return LlambaModel(sc, params)


# -------------------------------------------------------------- stage runner

def stage_trainable(stage: int, model: LlambaModel) -> list[str]:
    names = list(model.params)
    if stage == 1:
        return [n for n in names if ".mixer." in n and n.rsplit(".", 1)[1] in MATRIX_PARAMS]
    if stage == 2:
        return [n for n in names if ".mixer." in n]
    return names


def _mixer_prefixes(cfg):
    return [f"blocks.{i}.mixer." for i in range(cfg.n_blocks)]


def stage_loss(stage: int, teacher: TeacherModel, student: LlambaModel, tokens,
               trainable=None, per_layer: bool = False):
    """Record one stage's loss on a fresh tape.

    Returns (tape, loss node). With ``per_layer`` the stage 1/2 layer losses
    are kept on separate tapes and returned as a list of (tape, node) pairs.
    """
    tokens = np.atleast_2d(np.asarray(tokens))
    cfg = student.config
    dtype = student.dtype
    trainable = stage_trainable(stage, student) if trainable is None else trainable
    if stage == 3:
        tf = teacher_forward(teacher, tokens)
        tape = Tape()
        pn = graph.bind(tape, student.params, trainable)
        logits, _ = graph.student(tape, pn, cfg, tokens)
        target = np.exp(log_softmax(tf.logits.reshape(-1, cfg.vocab))).astype(dtype)
        return tape, tape.cross_entropy(logits, target)

    tf = teacher_forward(teacher, tokens, capture=("hidden_states",))
    if tf.attention.shape[2] != cfg.n_heads:
        raise AlignmentConfigError(
            f"teacher has {tf.attention.shape[2]} heads, student {cfg.n_heads}")
    out = []
    tape = None
    total = None
    for i, prefix in enumerate(_mixer_prefixes(cfg)):
        if tape is None or per_layer:
            tape = Tape()
        sub = {k: v for k, v in student.params.items() if k.startswith(prefix)}
        pn = graph.bind(tape, sub, trainable)
        u = tape.const(tf.mixer_inputs[i].astype(dtype))
        mo, M = graph.mixer(tape, pn, prefix, cfg.n_heads, cfg.head_dim, cfg.state_dim, u)
        if stage == 1:
            loss = graph.matrix_orientation(tape, M, tf.attention[:, i].astype(dtype))
        else:
            loss = graph.hidden_alignment(tape, mo, tf.mixer_outputs[i].astype(dtype))
        if per_layer:
            out.append((tape, loss))
        else:
            total = loss if total is None else tape.add(total, loss)
    return out if per_layer else (tape, total)


def loss_and_grads(stage, teacher, student, tokens, trainable=None):
    tape, loss = stage_loss(stage, teacher, student, tokens, trainable)
    grads = backward(tape, loss).named(tape)
    return float(tape.value(loss)[0]), grads


@dataclass
class StageReport:
    stage: int
    total_steps: int
    steps: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    student: LlambaModel | None = None
    opt: OptimizerState | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def write_csv(self, path) -> None:
        write_report_csv(path, self.steps, self.lrs, self.losses)


def write_report_csv(path, steps, lrs, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for s, lr, loss in zip(steps, lrs, losses):
            w.writerow([s, repr(float(lr)), repr(float(loss))])


def read_report_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in rows]


def run_stage(plan: StagePlan, teacher: TeacherModel, student: LlambaModel,
              token_stream: Iterable, opt: OptimizerState | None = None, start_step: int = 0,
              transfer: bool = True, second_teacher: TeacherModel | None = None,
              switch_step: int | None = None, on_step=None,
              stop_step: int | None = None) -> StageReport:
    """Train one stage for ``plan.total_steps`` steps (resuming at ``start_step``).

    ``token_stream`` yields (batch, seq_len) token arrays, one per step. Stage
    3 starts by transferring the teacher's non-mixer weights unless resuming
    or ``transfer`` is off. ``second_teacher`` replaces the teacher from
    ``switch_step`` on. ``stop_step`` ends the run early (the schedule still
    spans the full plan), which is how a run is split for checkpointing.
    Raises :class:`StageAbort` on a non-finite loss.
    """
    total = plan.total_steps
    stop = total if stop_step is None else min(stop_step, total)
    if plan.stage == 3 and transfer and start_step == 0:
        student = transfer_weights(teacher, student)
    trainable = stage_trainable(plan.stage, student)
    if opt is None:
        opt = OptimizerState.fresh(student.params, trainable)
    params = dict(student.params)
    report = StageReport(plan.stage, total)
    stream: Iterator = iter(token_stream)
    for step in range(start_step, stop):
        tokens = next(stream)
        active = teacher
        if second_teacher is not None and switch_step is not None and step >= switch_step:
            active = second_teacher
        lr = wsd_lr(step, total, plan)
        current = LlambaModel(student.config, params)
        loss, grads = loss_and_grads(plan.stage, active, current, tokens, trainable)
        if not np.isfinite(loss):
            raise StageAbort(step, loss)
        params, opt = adamw_step(params, grads, opt, lr)
        report.steps.append(step)
        report.lrs.append(lr)
        report.losses.append(loss)
        if on_step is not None:
            on_step(step, lr, loss)
    report.student = LlambaModel(student.config, params)
    report.opt = opt
    return report


def run_pipeline(plans, teacher: TeacherModel, student: LlambaModel, streams,
                 on_stage=None) -> list[StageReport]:
    """Run stage plans in order, each starting from the previous stage's student.

    ``streams(plan)`` returns the token iterator for a stage; every stage
    gets a fresh optimizer.
    """
    reports = []
    for plan in plans:
        rep = run_stage(plan, teacher, student, streams(plan))
        reports.append(rep)
        student = rep.student
        if on_stage is not None:
            on_stage(rep)
    return reports


def evaluate_kd(teacher: TeacherModel, student: LlambaModel, tokens) -> float:
    """KD loss of the student against the teacher on held-out tokens (numpy path)."""
    tokens = np.atleast_2d(tokens)
    s = student_forward(student, tokens).logits
    t = teacher_forward(teacher, tokens).logits
    return kd_loss(s.reshape(-1, s.shape[-1]), t.reshape(-1, t.shape[-1]))


def evaluate_stage_loss(stage: int, teacher, student, tokens) -> float:
    """Numpy-path value of a stage loss (no tape)."""
    tokens = np.atleast_2d(tokens)
    if stage == 3:
        return evaluate_kd(teacher, student, tokens)
    tf = teacher_forward(teacher, tokens, capture=("hidden_states",))
    total = 0.0
    for i in range(student.config.n_blocks):
        mp = student.mixer(i)
        u = tf.mixer_inputs[i].astype(student.dtype)
        if stage == 1:
            total += matrix_orientation_loss(materialize_mixer(project_inputs(mp, u)),
                                             tf.attention[:, i])
        else:
            total += hidden_state_alignment_loss(forward_parallel(mp, u), tf.mixer_outputs[i])
    return total


# ------------------------------------------------------------ config files

def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


_STAGE_KEYS = ("steps", "tokens", "batch_size", "peak_lr", "warmup_frac", "decay_frac", "min_lr")
_GLOBAL_KEYS = ("seq_len", "total_tokens", "seed", "dtype", "student.state_dim")


@dataclass
class DistillConfig:
    plans: list
    seed: int = 0
    dtype: str = "float64"
    state_dim: int | None = None

    def plan(self, stage: int) -> StagePlan:
        return self.plans[stage - 1]


def plans_from_config(kv: dict[str, str]) -> list[StagePlan]:
    return load_config(kv).plans


def load_config(kv: dict[str, str]) -> DistillConfig:
    """Distillation settings from key=value pairs.

    Global keys: seq_len, total_tokens, seed, dtype, student.state_dim. Per
    stage ``stageN.<field>`` with fields steps, tokens, batch_size, peak_lr,
    warmup_frac, decay_frac, min_lr. Unknown keys are rejected.
    """
    allowed = set(_GLOBAL_KEYS) | {f"stage{s}.{f}" for s in (1, 2, 3) for f in _STAGE_KEYS}
    unknown = sorted(set(kv) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        seq_len = int(kv.get("seq_len", 32))
        total_tokens = int(float(kv.get("total_tokens", 8_000_000)))
        out = []
        for plan in default_plans(total_tokens, seq_len=seq_len):
            pre = f"stage{plan.stage}."
            upd = {}
            if pre + "tokens" in kv:
                upd["token_budget"] = int(float(kv[pre + "tokens"]))
            if pre + "steps" in kv:
                upd["steps"] = int(kv[pre + "steps"])
            if pre + "batch_size" in kv:
                upd["batch_size"] = int(kv[pre + "batch_size"])
            for f in ("peak_lr", "warmup_frac", "decay_frac", "min_lr"):
                if pre + f in kv:
                    upd[f] = float(kv[pre + f])
            out.append(replace(plan, **upd))
        dtype = kv.get("dtype", "float64")
        if dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {dtype!r}")
        state_dim = int(kv["student.state_dim"]) if "student.state_dim" in kv else None
        return DistillConfig(out, int(kv.get("seed", 0)), dtype, state_dim)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
