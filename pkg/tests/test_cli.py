import os

import pytest

from bam import cli
from bam import config as C
from bam.harness import read_results

TINY = """
train_sizes = BIG-A:400, SMALL-A:100, MED-B:200, REG-C:200
dev_size = 200
epochs = 1
teacher_epochs = 1
teacher_alphas = 1.0
finetune_epochs = 1
hidden = 8, 8
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data(tmp_path, cfg, capsys):
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 0
    assert sorted(os.listdir(tmp_path / "d")) == sorted(f"{t}.{e}" for t in C.DEFAULT_TASKS for e in ("tsv", "meta"))
    # training from the written files matches training on the generated suite
    cfg2 = tmp_path / "files.cfg"
    cfg2.write_text(TINY + f"data_dir = {tmp_path / 'd'}\n")
    assert run("train-teacher", "--config", cfg, "--task", "MED-B", "--out", tmp_path / "a") == 0
    assert run("train-teacher", "--config", cfg2, "--task", "MED-B", "--out", tmp_path / "b") == 0
    out = capsys.readouterr().out.splitlines()
    assert out[-1].split()[-1] == out[-2].split()[-1]


def test_teacher_student_finetune(tmp_path, cfg, capsys):
    for t in ("SMALL-A", "BIG-A"):
        assert run("train-teacher", "--config", cfg, "--task", t, "--out", tmp_path) == 0
    flags = [x for t in ("SMALL-A", "BIG-A") for x in ("--teacher", f"{t}={tmp_path}/teacher-{t}-s0.ckpt")]
    assert run("train-student", "--config", cfg, "--method", "Single->Multi{SMALL-A,BIG-A}", *flags, "--out", tmp_path) == 0
    student = next(p for p in os.listdir(tmp_path) if p.startswith("Single-Multi"))
    assert run("finetune", "--config", cfg, "--checkpoint", tmp_path / student, "--task", "SMALL-A", "--out", tmp_path) == 0
    assert "SMALL-A:" in capsys.readouterr().out


def test_bad_teacher_is_clean_error(tmp_path, cfg, capsys):
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint at all, definitely not" * 3)
    code = run("train-student", "--config", cfg, "--method", "Single->Multi{SMALL-A}",
               "--teacher", f"SMALL-A={tmp_path}/junk.ckpt", "--out", tmp_path)
    assert code == 2 and "checksum" in capsys.readouterr().err


def test_matrix_significance_report(tmp_path, cfg, capsys):
    out = tmp_path / "m"
    assert run("run-matrix", "--config", cfg, "--methods", "Single,Multi", "--seeds", "0-4", "--out", out) == 0
    assert len(read_results(out / "results.tsv")) == 10
    assert run("run-matrix", "--config", cfg, "--methods", "Single", "--seeds", "0", "--out", out) == 2
    assert run("run-matrix", "--config", cfg, "--methods", "Single", "--seeds", "0", "--out", out, "--resume") == 0
    capsys.readouterr()
    assert run("significance", "--results", out / "results.tsv", "--compare", "Multi>Single", "--test", "mwu",
               "--out", out) == 0
    assert "Mann-Whitney" in capsys.readouterr().out
    assert (out / "significance.tsv").exists()
    assert run("report", "--results", out / "results.tsv", "--compare", "Multi>Single", "--resamples", "2000") == 0
    for f in ("medians.tsv", "medians.txt", "trials.png", "medians.png", "significance.txt"):
        assert (out / f).exists()
    assert run("significance", "--results", out / "results.tsv", "--compare", "Nope>Single") == 2


def test_failed_cells_set_exit_code(tmp_path, cfg):
    assert run("run-matrix", "--config", cfg, "--methods", "Multi{NOPE}", "--seeds", "0", "--out", tmp_path) == 1
