import struct

import numpy as np
import pytest

from llamba import io
from llamba.model import LlambaConfig, TeacherConfig, init_student, init_teacher, student_forward
from llamba.mohawk import OptimizerState, StagePlan, run_stage, stage_trainable
from llamba.quant import QuantTensor, quantize, quantize_params

CFG = LlambaConfig(n_blocks=1, d_model=8, n_heads=2, head_dim=4, state_dim=4, mlp_hidden=12, vocab=11)


def test_raw_round_trip_all_dtypes(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 5)).astype(np.float32),
        "b": rng.standard_normal(7),
        "q": quantize(rng.standard_normal((4, 40))),
        "scalar": np.array(2.5),
    }
    io.write_raw(tmp_path / "t.lmba", {"kind": "raw", "note": "x=y"}, tensors)
    back = io.read_raw(tmp_path / "t.lmba")
    assert back.header == {"kind": "raw", "note": "x=y"}
    for k in ("a", "b", "scalar"):
        assert back.tensors[k].dtype == tensors[k].dtype
        assert np.array_equal(back.tensors[k], tensors[k])
    q, q2 = tensors["q"], back.tensors["q"]
    assert isinstance(q2, QuantTensor)
    assert np.array_equal(q.dequantize(), q2.dequantize())
    assert np.array_equal(q.zeros, q2.zeros)


def test_payloads_are_aligned(tmp_path, rng):
    io.write_raw(tmp_path / "t.lmba", {}, {"x": rng.standard_normal(3), "y": rng.standard_normal(5)})
    buf = (tmp_path / "t.lmba").read_bytes()
    # header: magic, version, header_len=0, count=2, then the x entry
    assert buf[:4] == b"LMBA"
    assert struct.unpack_from("<IQI", buf, 4) == (1, 0, 2)
    name_len = struct.unpack_from("<I", buf, 20)[0]
    off = struct.unpack_from("<Q", buf, 24 + name_len + 1 + 4 + 8)[0]
    assert off % 64 == 0
    assert np.array_equal(np.frombuffer(buf, "<f8", 3, off), io.read_raw(tmp_path / "t.lmba").tensors["x"])


def test_model_round_trip(tmp_path):
    m = init_student(CFG, identity=False, dtype=np.float64)
    io.save(m, tmp_path / "s.lmba")
    back = io.load(tmp_path / "s.lmba")
    assert back.config == CFG
    toks = np.arange(6) % 11
    assert np.array_equal(student_forward(back, toks).logits, student_forward(m, toks).logits)

    t = init_teacher(TeacherConfig(1, 8, 2, 4, 12, vocab=11, recency_slopes=(1.0, 0.5)))
    io.save(t, tmp_path / "t.lmba")
    assert io.load(tmp_path / "t.lmba").config == t.config


def test_quantized_model_round_trip(tmp_path):
    m = init_student(CFG, identity=False)
    qm = type(m)(CFG, quantize_params(m.params))
    io.save(qm, tmp_path / "q.lmba")
    back = io.load(tmp_path / "q.lmba")
    assert back.is_quantized
    toks = np.arange(6) % 11
    assert np.array_equal(student_forward(back, toks).logits, student_forward(qm, toks).logits)


def test_save_is_deterministic(tmp_path):
    m = init_student(CFG, seed=5)
    io.save(m, tmp_path / "a.lmba")
    io.save(m.copy(), tmp_path / "b.lmba")
    assert (tmp_path / "a.lmba").read_bytes() == (tmp_path / "b.lmba").read_bytes()


@pytest.fixture
def saved(tmp_path):
    path = tmp_path / "m.lmba"
    io.save(init_student(CFG), path)
    return path


def test_bad_magic(saved):
    buf = bytearray(saved.read_bytes())
    buf[:4] = b"GGUF"
    saved.write_bytes(bytes(buf))
    with pytest.raises(io.FormatError, match="magic"):
        io.load(saved)


def test_bad_version(saved):
    buf = bytearray(saved.read_bytes())
    buf[4:8] = struct.pack("<I", 9)
    saved.write_bytes(bytes(buf))
    with pytest.raises(io.VersionError):
        io.load(saved)


def test_truncation_names_tensor(saved):
    raw = io.read_raw(saved)
    last = sorted(raw.tensors)[-1]
    saved.write_bytes(saved.read_bytes()[:-3])
    with pytest.raises(io.TruncationError, match=last.replace(".", r"\.")):
        io.load(saved)


def test_truncated_table(saved):
    saved.write_bytes(saved.read_bytes()[:200])
    with pytest.raises(io.TruncationError):
        io.load(saved)


def test_trailing_garbage(saved):
    saved.write_bytes(saved.read_bytes() + b"\0")
    with pytest.raises(io.FormatError, match="trailing"):
        io.load(saved)


def test_unknown_dtype_tag(tmp_path):
    path = tmp_path / "u.lmba"
    io.write_raw(path, {}, {"x": np.ones(2)})
    buf = bytearray(path.read_bytes())
    buf[4 + 4 + 8 + 4 + 4 + 1] = 7   # dtype byte of the only entry (name "x")
    path.write_bytes(bytes(buf))
    with pytest.raises(io.UnknownDtypeError):
        io.read_raw(path)
    with pytest.raises(io.UnknownDtypeError):
        io.write_raw(path, {}, {"x": np.ones(2, dtype=np.int32)})


def test_checkpoint_round_trip(tmp_path):
    m = init_student(CFG, dtype=np.float64)
    names = stage_trainable(2, m)
    opt = OptimizerState.fresh(m.params, names)
    opt.m[names[0]] += 0.5
    opt.step = 7
    ck = io.Checkpoint(m, stage=2, step=7, opt_m=opt.m, opt_v=opt.v, opt_step=7,
                       hyper={"beta1": 0.9, "beta2": 0.95, "weight_decay": 0.1, "eps": 1e-8},
                       meta={"seed": 3})
    io.save(ck, tmp_path / "c.lmba")
    back = io.load(tmp_path / "c.lmba")
    assert (back.stage, back.step, back.opt_step) == (2, 7, 7)
    assert back.hyper["eps"] == 1e-8 and back.meta == {"seed": "3"}
    assert set(back.opt_m) == set(names)
    assert np.array_equal(back.opt_m[names[0]], opt.m[names[0]])


def test_resume_from_file_is_bit_identical(tmp_path):
    teacher = init_teacher(TeacherConfig(1, 8, 2, 4, 12, vocab=11, recency_slopes=(1.0, 0.5)),
                           dtype=np.float64)
    student = init_student(CFG, dtype=np.float64)
    batches = [np.random.default_rng(i).integers(0, 11, (2, 6)) for i in range(6)]
    plan = StagePlan(2, 0, 2, 6, peak_lr=1e-2, steps=6)
    full = run_stage(plan, teacher, student, batches)

    half = run_stage(plan, teacher, student, batches, stop_step=3)
    o = half.opt
    io.save(io.Checkpoint(half.student, 2, 3, o.m, o.v, o.step,
                          {"beta1": o.beta1, "beta2": o.beta2, "weight_decay": o.weight_decay,
                           "eps": o.eps}), tmp_path / "c.lmba")
    ck = io.load(tmp_path / "c.lmba")
    opt = OptimizerState(ck.opt_m, ck.opt_v, ck.opt_step, **ck.hyper)
    rest = run_stage(plan, teacher, ck.model, batches[3:], opt=opt, start_step=3)
    for k, v in full.student.params.items():
        assert np.array_equal(rest.student.params[k], v), k
