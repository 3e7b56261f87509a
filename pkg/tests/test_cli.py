import logging
import subprocess
import sys

import numpy as np
import pytest

from llamba import bench, io
from llamba.cli import (EXIT_ALREADY_QUANTIZED, EXIT_DISTILL_ABORT, EXIT_GEN_NAN, EXIT_OK, EXIT_USAGE,
                        main)
from llamba.model import LlambaConfig, init_student
from llamba.mohawk import read_report_csv

SHORT = """seq_len = 8
stage1.steps = 3
stage1.batch_size = 2
stage2.steps = 4
stage2.batch_size = 2
stage3.steps = 5
stage3.batch_size = 2
"""


def run(capfd, *argv):
    code = main(list(argv))
    out, err = capfd.readouterr()
    return code, out, err


@pytest.fixture
def small_model(tmp_path):
    cfg = LlambaConfig(1, 16, 2, 8, 4, 32, vocab=258)
    path = tmp_path / "small.lmba"
    io.save(init_student(cfg, identity=False), path)
    return path


def test_generate_zero_temperature_is_deterministic(capfd, small_model):
    a = run(capfd, "generate", "--model", str(small_model), "--prompt", "hi", "--max-tokens", "12")
    b = run(capfd, "generate", "--model", str(small_model), "--prompt", "hi", "--max-tokens", "12")
    assert a[0] == EXIT_OK and a[1] == b[1]


def test_generate_seed_from_environment(capfd, small_model, monkeypatch):
    args = ("generate", "--model", str(small_model), "--prompt", "x", "--max-tokens", "20",
            "--temp", "1.5")
    monkeypatch.setenv("LLAMBA_SEED", "7")
    first = run(capfd, *args, "--seed", "1")[1]
    assert run(capfd, *args, "--seed", "2")[1] == first
    monkeypatch.setenv("LLAMBA_SEED", "bad")
    assert run(capfd, *args)[0] == EXIT_USAGE


def test_generate_zero_tokens(capfd, small_model):
    assert run(capfd, "generate", "--model", str(small_model), "--max-tokens", "0") == (EXIT_OK, "\n", "")


def test_generate_verify(capfd, small_model):
    code, _, err = run(capfd, "generate", "--model", str(small_model), "--prompt", "abc",
                       "--max-tokens", "8", "--verify")
    assert code == EXIT_OK and "relative error" in err


def test_generate_bundled_student(capfd):
    code, out, _ = run(capfd, "generate", "--model", "@toy-student", "--prompt", "ab", "--max-tokens", "5")
    assert code == EXIT_OK and len(out) >= 1


def test_generate_nan_logits(capfd, tmp_path):
    m = init_student(LlambaConfig(1, 16, 2, 8, 4, 32, vocab=258))
    m.params["head"][3, 0] = np.nan
    io.save(m, tmp_path / "nan.lmba")
    assert run(capfd, "generate", "--model", str(tmp_path / "nan.lmba"))[0] == EXIT_GEN_NAN


def test_bad_model_file(capfd, tmp_path):
    (tmp_path / "junk.lmba").write_bytes(b"not a model")
    code, _, err = run(capfd, "generate", "--model", str(tmp_path / "junk.lmba"))
    assert code == EXIT_USAGE and "magic" in err
    assert run(capfd, "generate", "--model", str(tmp_path / "missing.lmba"))[0] == EXIT_USAGE


def test_quantize_and_requantize(capfd, small_model, tmp_path):
    out = tmp_path / "q.lmba"
    code, text, _ = run(capfd, "quantize", "--model", str(small_model), "--out", str(out))
    assert code == EXIT_OK and "smaller" in text
    assert io.load(out).is_quantized
    assert run(capfd, "quantize", "--model", str(out), "--out", str(tmp_path / "qq.lmba"))[0] \
        == EXIT_ALREADY_QUANTIZED
    assert run(capfd, "quantize", "--model", str(small_model), "--bits", "8",
               "--out", str(tmp_path / "q8.lmba"))[0] == EXIT_USAGE
    code, _, _ = run(capfd, "generate", "--model", str(out), "--prompt", "a", "--max-tokens", "4")
    assert code == EXIT_OK


def test_distill_all_stages_writes_reports(capfd, tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(SHORT)
    out = tmp_path / "run.lmba"
    code, text, _ = run(capfd, "distill", "--config", str(cfg), "--out", str(out),
                        "--export", str(tmp_path / "final.lmba"))
    assert code == EXIT_OK
    assert "initial kd loss" in text and "final kd loss" in text
    for stage, steps in ((1, 3), (2, 4), (3, 5)):
        rows = read_report_csv(tmp_path / f"run.lmba.stage{stage}.csv")
        assert [r[0] for r in rows] == list(range(steps))
    ck = io.load(out)
    assert (ck.stage, ck.step) == (3, 5)
    assert io.load(tmp_path / "final.lmba").dtype == np.float32


def test_distill_resume_matches_uninterrupted(capfd, tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(SHORT)
    common = ("distill", "--config", str(cfg), "--stage", "2")
    assert run(capfd, *common, "--out", str(tmp_path / "full.lmba"))[0] == EXIT_OK
    assert run(capfd, *common, "--out", str(tmp_path / "half.lmba"), "--max-steps", "2")[0] == EXIT_OK
    assert run(capfd, *common, "--out", str(tmp_path / "rest.lmba"), "--init", str(tmp_path / "half.lmba"),
               "--resume")[0] == EXIT_OK
    full, rest = io.load(tmp_path / "full.lmba"), io.load(tmp_path / "rest.lmba")
    assert rest.step == 4
    for k, v in full.model.params.items():
        assert np.array_equal(rest.model.params[k], v), k


def test_distill_later_stage_without_init_warns(capfd, tmp_path, caplog):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(SHORT)
    with caplog.at_level(logging.WARNING):
        code, _, _ = run(capfd, "distill", "--config", str(cfg), "--stage", "2",
                         "--out", str(tmp_path / "s2.lmba"))
    assert code == EXIT_OK
    assert any("identity init" in r.message for r in caplog.records)
    assert len(read_report_csv(tmp_path / "s2.lmba.csv")) == 4


def test_distill_bad_config(capfd, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("stage9.steps = 3\n")
    assert run(capfd, "distill", "--config", str(cfg), "--out", str(tmp_path / "x"))[0] == EXIT_USAGE


def test_distill_nan_aborts(capfd, tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(SHORT)
    first = tmp_path / "s1.lmba"
    assert run(capfd, "distill", "--config", str(cfg), "--stage", "1", "--out", str(first))[0] == EXIT_OK
    ck = io.load(first)
    ck.model.params["blocks.0.mixer.W_B"][:] = np.nan
    io.save(ck.model, tmp_path / "nan.lmba")
    code, _, err = run(capfd, "distill", "--config", str(cfg), "--stage", "2", "--init",
                       str(tmp_path / "nan.lmba"), "--out", str(tmp_path / "s2.lmba"))
    assert code == EXIT_DISTILL_ABORT and "step 0" in err


def test_bench_csv_parses_back(capfd, small_model, tmp_path):
    out = tmp_path / "b.csv"
    code, _, _ = run(capfd, "bench", "--model", str(small_model), "--contexts", "4,16",
                     "--batches", "1,2", "--tokens", "2", "--repeats", "1", "--out", str(out))
    assert code == EXIT_OK
    rows = bench.read_csv(out)
    assert len(rows) == 8
    assert {r["model"] for r in rows} == {"student", "attention"}
    student = [r for r in rows if r["model"] == "student"]
    assert len({r["state_bytes"] for r in student if r["batch"] == 1}) == 1
    attn = {(r["context"], r["batch"]): r["state_bytes"] for r in rows if r["model"] == "attention"}
    assert attn[(16, 1)] == 4 * attn[(4, 1)]


def test_bench_memory_limit_reports_oom(capfd, small_model, tmp_path):
    out = tmp_path / "b.csv"
    run(capfd, "bench", "--model", str(small_model), "--contexts", "4,4096", "--batches", "1",
        "--tokens", "1", "--repeats", "1", "--mem-limit", "20000", "--out", str(out))
    rows = {(r["model"], r["context"]): r for r in bench.read_csv(out)}
    assert rows[("attention", 4096)]["latency_ms"] == bench.OOM
    assert isinstance(rows[("student", 4096)]["latency_ms"], float)


def test_bench_rejects_bad_list(capfd, small_model):
    with pytest.raises(SystemExit) as info:
        main(["bench", "--model", str(small_model), "--contexts", "a,b"])
    assert info.value.code == EXIT_USAGE


def test_console_entry_point(small_model):
    proc = subprocess.run([sys.executable, "-m", "llamba.cli", "generate", "--model", str(small_model),
                           "--max-tokens", "3"], capture_output=True)
    assert proc.returncode == 0
