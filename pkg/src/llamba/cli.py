"""Command-line interface: generate, distill, quantize, bench."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, io, mohawk, toy
from .model import (LlambaModel, TeacherModel, decode, init_student, sample, student_forward)
from .quant import AlreadyQuantizedError, quantize_params

log = logging.getLogger("llamba")

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2          # bad input file, bad config, unsupported option
EXIT_GEN_NAN = 3
EXIT_DISTILL_ABORT = 4
EXIT_ALREADY_QUANTIZED = 5
EXIT_VERIFY = 6

BOS, EOS = 256, 257
BUNDLED = {"@toy-student": toy.bundled_student_path, "@toy-teacher": toy.bundled_teacher_path}


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _resolve(path: str) -> Path:
    return BUNDLED[path]() if path in BUNDLED else Path(path)


def _load(path: str, kinds):
    try:
        obj = io.load(_resolve(path))
    except (OSError, io.FormatError) as exc:
        raise CliError(f"cannot read model file {path}: {exc}") from exc
    if not isinstance(obj, kinds):
        raise CliError(f"{path} holds a {type(obj).__name__}, expected "
                       + " or ".join(k.__name__ for k in kinds))
    return obj


def _seed(arg_seed: int) -> int:
    env = os.environ.get("LLAMBA_SEED")
    if env is None or env == "":
        return arg_seed
    try:
        return int(env)
    except ValueError as exc:
        raise CliError(f"LLAMBA_SEED must be an integer, got {env!r}") from exc


def encode_text(text: str, vocab: int) -> list[int]:
    ids = list(text.encode("utf-8"))
    return [BOS] + ids if vocab > BOS else ids


def decode_tokens(ids) -> bytes:
    return bytes(i for i in ids if i < 256)


# ------------------------------------------------------------------ generate

def cmd_generate(args) -> int:
    obj = _load(args.model, (LlambaModel, io.Checkpoint))
    model = obj.model if isinstance(obj, io.Checkpoint) else obj
    vocab = model.config.vocab
    prompt = encode_text(args.prompt, vocab)
    if not prompt:
        raise CliError("empty prompt and the model has no BOS token")
    rng = np.random.default_rng(_seed(args.seed))
    eos = EOS if vocab > EOS else None
    out = sys.stdout.buffer
    generated: list[int] = []
    step_logits = []
    if args.max_tokens > 0:
        res, states = student_forward(model, prompt, return_state=True)
        logits = res.logits[-1]
        for _ in range(args.max_tokens):
            if not np.all(np.isfinite(logits)):
                raise CliError(f"non-finite logits after {len(generated)} tokens", EXIT_GEN_NAN)
            step_logits.append(logits)
            tok = sample(logits, args.temp, rng)
            generated.append(tok)
            if tok == eos:
                break
            out.write(decode_tokens([tok]))
            out.flush()
            logits, states = decode(model, states, tok)
    out.write(b"\n")
    out.flush()
    if args.verify and generated:
        full = student_forward(model, prompt + generated[:-1]).logits[len(prompt) - 1:]
        dec = np.stack(step_logits)
        rel = float(np.max(np.abs(dec - full)) / max(np.max(np.abs(full)), 1e-30))
        print(f"verify: decode vs prefill max relative error {rel:.3e}", file=sys.stderr)
        if rel > 1e-4:
            raise CliError("decode logits disagree with the full-sequence forward", EXIT_VERIFY)
    return EXIT_OK


# ------------------------------------------------------------------ distill

def _student_for(teacher: TeacherModel, cfg: mohawk.DistillConfig):
    tc = teacher.config
    state_dim = cfg.state_dim or toy.TOY_STUDENT.state_dim
    scfg = dataclasses.replace(toy.TOY_STUDENT, n_blocks=tc.n_blocks, d_model=tc.d_model,
                               n_heads=tc.n_heads, head_dim=tc.head_dim, state_dim=state_dim,
                               mlp_hidden=tc.mlp_hidden, vocab=tc.vocab,
                               tie_embeddings=tc.tie_embeddings, norm_eps=tc.norm_eps)
    return init_student(scfg, seed=cfg.seed, dtype=np.dtype(cfg.dtype))


def _report_path(args, stage, multi):
    base = Path(args.report) if args.report else Path(str(args.out) + ".csv")
    return base.with_name(f"{base.stem}.stage{stage}{base.suffix}") if multi else base


def cmd_distill(args) -> int:
    try:
        text = Path(args.config).read_text() if args.config else toy.DISTILL_CONFIG
        cfg = mohawk.load_config(mohawk.parse_kv(text))
    except OSError as exc:
        raise CliError(f"cannot read config {args.config}: {exc}") from exc
    except mohawk.ConfigError as exc:
        raise CliError(f"bad config: {exc}") from exc
    seed = _seed(cfg.seed if args.seed is None else args.seed)
    cfg = dataclasses.replace(cfg, seed=seed)
    teacher = _load(args.teacher, (TeacherModel,))
    teacher = TeacherModel(teacher.config, {k: np.asarray(v, dtype=cfg.dtype)
                                            for k, v in teacher.params.items()})
    stages = [1, 2, 3] if args.stage == "all" else [int(args.stage)]

    start_step, opt = 0, None
    if args.init:
        ck = _load(args.init, (io.Checkpoint, LlambaModel))
        student = ck.model if isinstance(ck, io.Checkpoint) else ck
        if isinstance(ck, io.Checkpoint) and args.resume:
            if len(stages) != 1 or ck.stage != stages[0]:
                raise CliError("--resume needs --stage equal to the checkpoint's stage")
            start_step = ck.step
            opt = mohawk.OptimizerState(ck.opt_m, ck.opt_v, ck.opt_step, **ck.hyper)
    else:
        if stages[0] > 1:
            log.warning("stage %d without an earlier-stage checkpoint: starting from identity init",
                        stages[0])
        student = _student_for(teacher, cfg)

    eval_toks = toy.eval_tokens(seq_len=cfg.plan(1).seq_len)
    kd_start = mohawk.evaluate_kd(teacher, student, eval_toks)
    print(f"initial kd loss {kd_start:.6f}")

    for stage in stages:
        plan = cfg.plan(stage)
        stream = toy.stage_stream(plan, seed, start=start_step)

        def on_step(step, lr, loss, _stage=stage):
            if args.verbose and step % 50 == 0:
                print(f"stage {_stage} step {step} lr {lr:.3e} loss {loss:.6f}", file=sys.stderr)

        try:
            rep = mohawk.run_stage(plan, teacher, student, stream, opt=opt, start_step=start_step,
                                   on_step=on_step, stop_step=args.max_steps)
        except mohawk.StageAbort as exc:
            raise CliError(f"stage {stage} aborted: non-finite loss at step {exc.step}",
                           EXIT_DISTILL_ABORT) from exc
        except mohawk.TransferError as exc:
            raise CliError(str(exc)) from exc
        rep.write_csv(_report_path(args, stage, len(stages) > 1))
        done = start_step + len(rep.losses)
        print(f"stage {stage}: {len(rep.losses)} steps, loss {rep.losses[0] if rep.losses else float('nan'):.6f}"
              f" -> {rep.losses[-1] if rep.losses else float('nan'):.6f}")
        student, opt, start_step = rep.student, None, 0
        last = (stage, done, rep.opt)

    stage, done, final_opt = last
    io.save(io.Checkpoint(student, stage, done, final_opt.m, final_opt.v, final_opt.step,
                          {"beta1": final_opt.beta1, "beta2": final_opt.beta2,
                           "weight_decay": final_opt.weight_decay, "eps": final_opt.eps},
                          {"seed": seed}), args.out)
    kd_end = mohawk.evaluate_kd(teacher, student, eval_toks)
    print(f"final kd loss {kd_end:.6f}")
    if args.export:
        io.save(LlambaModel(student.config, {k: np.asarray(v, dtype=np.float32)
                                             for k, v in student.params.items()}), args.export)
    return EXIT_OK


# ------------------------------------------------------------------ quantize

def cmd_quantize(args) -> int:
    if args.bits != 4:
        raise CliError(f"only 4-bit quantization is supported, got --bits {args.bits}")
    if args.group < 1:
        raise CliError("--group must be >= 1")
    obj = _load(args.model, (LlambaModel, TeacherModel, io.Checkpoint))
    if isinstance(obj, io.Checkpoint):
        obj = obj.model
    try:
        params = quantize_params(obj.params, args.group)
    except AlreadyQuantizedError as exc:
        raise CliError(f"{args.model}: {exc}", EXIT_ALREADY_QUANTIZED) from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    io.save(type(obj)(obj.config, params), args.out)
    before = _resolve(args.model).stat().st_size
    after = Path(args.out).stat().st_size
    print(f"{before} -> {after} bytes ({before / after:.2f}x smaller)")
    return EXIT_OK


# ------------------------------------------------------------------ bench

def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return vals


def cmd_bench(args) -> int:
    obj = _load(args.model, (LlambaModel, io.Checkpoint))
    model = obj.model if isinstance(obj, io.Checkpoint) else obj
    baseline = bench.matched_baseline(model) if args.baseline == "attention-toy" else None
    cells = bench.run_grid(model, baseline, args.contexts, args.batches, args.tokens,
                           args.repeats, args.mem_limit)
    if args.out:
        bench.write_csv(cells, args.out)
    else:
        bench.write_csv(cells, sys.stdout)
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="llamba", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="sample text from a student model")
    g.add_argument("--model", required=True, help="model file, or @toy-student")
    g.add_argument("--prompt", default="")
    g.add_argument("--max-tokens", type=int, default=64)
    g.add_argument("--temp", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--verify", action="store_true",
                   help="check decode logits against a full-sequence forward")
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("distill", help="run distillation stages against a teacher")
    d.add_argument("--config", help="key=value config file (default: bundled toy config)")
    d.add_argument("--stage", choices=["1", "2", "3", "all"], default="all")
    d.add_argument("--teacher", default="@toy-teacher")
    d.add_argument("--out", required=True, help="checkpoint path")
    d.add_argument("--report", help="CSV report path (default: OUT.csv)")
    d.add_argument("--init", help="student model or checkpoint to start from")
    d.add_argument("--resume", action="store_true", help="continue the --init checkpoint's stage")
    d.add_argument("--max-steps", type=int, help="stop after this step (schedule unchanged)")
    d.add_argument("--export", help="also write the final student as a float32 model file")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_distill)

    q = sub.add_parser("quantize", help="4-bit quantize a model's linear weights")
    q.add_argument("--model", required=True)
    q.add_argument("--bits", type=int, default=4)
    q.add_argument("--group", type=int, default=32)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bench", help="decode throughput/memory vs an attention baseline")
    b.add_argument("--model", required=True)
    b.add_argument("--baseline", choices=["attention-toy", "none"], default="attention-toy")
    b.add_argument("--contexts", type=_int_list, default=list(bench.DEFAULT_CONTEXTS))
    b.add_argument("--batches", type=_int_list, default=list(bench.DEFAULT_BATCHES))
    b.add_argument("--tokens", type=int, default=16, help="timed decode steps per repeat")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--mem-limit", type=int, help="bytes; cells needing more are reported OOM")
    b.add_argument("--out", help="CSV path (default stdout)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"llamba {args.command}: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
