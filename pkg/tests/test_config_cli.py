import json

import numpy as np
import pytest

from mohawk import corpus
from mohawk.checkpoint import load_checkpoint
from mohawk.cli import main
from mohawk.config import ConfigError, defaults, load_config, parse_config
from mohawk.distill import METRIC_NAMES, model_from_checkpoint

SMALL = """\
[model]
vocab_size = 256
d_model = 16
n_layers = 2
n_heads = 2
d_mlp = 32
max_seq_len = 16

[teacher_training]
corpus_size = 20000
tokens = 3200
batch_size = 2
seq_len = 16
eval_every = 50

[distill]
teacher = teacher.ckpt
corpus_size = 20000
stage1_tokens = {s1}
stage2_tokens = {s2}
stage3_tokens = {s3}
batch_size = 2
seq_len = 8
eval_windows = 4

[approx]
source = synthetic
num_samples = 2
seq_len = 8
steps = 30
state_sizes = 2, 4

[sweep]
stage_a_grid = 0, 32
stage_b_grid = 32
seeds = 0, 1
"""


def write_config(dir_, s1=0, s2=0, s3=0):
    path = dir_ / "run.ini"
    path.write_text(SMALL.format(s1=s1, s2=s2, s3=s3))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["train-teacher", "--config", str(write_config(d)), "--out", str(d)]) == 0
    return d


def error_json(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


# --- config -----------------------------------------------------------------


def test_missing_config_means_defaults():
    assert load_config(None) == defaults()


def test_values_and_lists_parse(tmp_path):
    cfg = parse_config("[approx]\nstate_sizes = 2, 4 ; inline\nlrs = 0.5\n[distill]\nfreeze_set = mlp,lm_head\n",
                       tmp_path)
    assert cfg["approx"]["state_sizes"] == (2, 4)
    assert cfg["approx"]["lrs"] == (0.5,)
    assert cfg["distill"]["freeze_set"] == ("mlp", "lm_head")
    assert cfg["distill"]["stage1_tokens"] == defaults()["distill"]["stage1_tokens"]


def test_paths_resolve_against_config_dir(tmp_path):
    cfg = parse_config("[distill]\nteacher = sub/t.ckpt\n", tmp_path)
    assert cfg["distill"]["teacher"] == (tmp_path / "sub" / "t.ckpt").resolve()


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("[approx]\nsteps = 10\nbogus = 1\n", 3, "unknown key 'bogus'"),
        ("[model]\nd_model = 8\n\n[nope]\n", 4, "unknown section"),
        ("[model]\nd_model = eight\n", 2, "bad value"),
        ("d_model = 8\n", 1, "outside of any section"),
        ("[model]\nd_model = 8\nd_model = 9\n", 3, "duplicate key"),
        ("[model]\n[model]\n", 2, "duplicate section"),
    ],
)
def test_parse_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    assert exc.value.line == line
    assert fragment in str(exc.value)
    assert str(exc.value).startswith(f"line {line}:")


def test_cli_reports_config_errors_as_json(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[approx]\nbogus = 1\n")
    assert main(["approx-bench", "--config", str(path), "--out", str(tmp_path)]) == 2
    err = error_json(capsys)
    assert err["error"] == "config" and err["line"] == 2


def test_cli_reports_other_errors_as_json(tmp_path, capsys):
    path = tmp_path / "run.ini"
    path.write_text("[distill]\nteacher = missing.ckpt\n")
    assert main(["distill", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "missing.ckpt" in error_json(capsys)["message"]
    assert main(["gen-corpus", "--size", "0", "--out", str(tmp_path)]) == 1
    assert main(["approx-bench", "--jobs", "0", "--out", str(tmp_path)]) == 1


# --- commands ---------------------------------------------------------------


def test_gen_corpus_bytes_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-corpus", "--size", "1000", "--seed", "5", "--out", str(a)]) == 0
    assert main(["gen-corpus", "--size", "1000", "--seed", "5", "--out", str(b)]) == 0
    raw = (a / "corpus.u16").read_bytes()
    assert len(raw) == 2000 and raw == (b / "corpus.u16").read_bytes()
    assert np.array_equal(np.frombuffer(raw, dtype="<u2"), corpus.generate(5, 1000))


def test_train_teacher_writes_a_teacher(workdir):
    model = model_from_checkpoint(load_checkpoint(workdir / "teacher.ckpt"))
    assert type(model).__name__ == "TeacherModel"
    assert model.cfg.d_model == 16


def test_distill_with_zero_budgets_emits_initial_metrics(workdir, tmp_path):
    out = tmp_path / "d"
    cfg = write_config(workdir)
    assert main(["distill", "--config", str(cfg), "--out", str(out)]) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "stage,tokens,metric,value"
    assert [l.split(",")[2] for l in lines[1:]] == list(METRIC_NAMES)
    assert all(l.startswith("init,0,") for l in lines[1:])
    assert (out / "student.ckpt").exists()


def test_distill_rerun_is_byte_identical(workdir, tmp_path):
    cfg = write_config(workdir, 32, 32, 48)
    for name in ("a", "b"):
        assert main(["distill", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "student.ckpt").read_bytes() == (tmp_path / "b" / "student.ckpt").read_bytes()
    assert main(["distill", "--config", str(cfg), "--seed", "9", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


def test_approx_bench_rows_and_jobs_independence(tmp_path):
    cfg = write_config(tmp_path)
    outs = []
    for jobs in ("1", "2", "1"):
        out = tmp_path / f"j{len(outs)}"
        assert main(["approx-bench", "--config", str(cfg), "--jobs", jobs, "--out", str(out)]) == 0
        outs.append((out / "approx.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]
    lines = outs[0].decode().splitlines()
    assert len(lines) == 1 + 11  # toeplitz plus five families at two state sizes
    assert lines[0].split(",")[0] == "family"


def test_sweep_row_count(workdir, tmp_path):
    cfg = write_config(workdir)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "stageA_tokens,stageB_tokens,seed,stage1_dist,stage2_dist,kd_loss,heldout_ppl"
    assert len(lines) == 1 + 2 * 1 * 2


def test_eval_command(workdir, tmp_path, capsys):
    cfg = write_config(workdir)
    assert main(["distill", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "student.ckpt"),
                 "--out", str(tmp_path)]) == 0
    printed = capsys.readouterr().out
    assert (tmp_path / "eval.csv").read_text() == printed
    names = [l.split(",")[0] for l in printed.splitlines()[1:]]
    assert sorted(names) == sorted(METRIC_NAMES)


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--instances", "1", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "gradcheck.csv").read_text()
    assert text == capsys.readouterr().out
    assert text.count(",pass") == len(text.splitlines()) - 1
