import filecmp
import math
import statistics

import numpy as np
import pytest

from bam import distill, harness
from bam import model as M
from bam import tensor as T


def params_equal(a, b):
    return a.keys() == b.keys() and all(a[n].tobytes() == b[n].tobytes() for n in a)


@pytest.fixture(scope="module")
def teachers(tiny_config, tiny_data):
    return {t: harness.train_single(t, tiny_data, tiny_config, seed=3) for t in tiny_config.tasks}


def test_train_single_descends_and_is_deterministic(tiny_config, tiny_data):
    cfg = tiny_config.replace(teacher_epochs=2.0)
    ck = harness.train_single("MED-B", tiny_data, cfg, seed=1)
    loss = ck.history["loss"]
    per_epoch = math.ceil(200 / cfg.teacher_batch_size)
    assert np.mean(loss[per_epoch:]) < np.mean(loss[:per_epoch])
    assert len(ck.history["dev"]) == 2
    again = harness.train_single("MED-B", tiny_data, cfg, seed=1)
    assert ck.content_hash() == again.content_hash()
    assert harness.train_single("MED-B", tiny_data, cfg, seed=2).content_hash() != ck.content_hash()


def test_train_single_picks_alpha_by_dev(tiny_config, tiny_data):
    ck = harness.train_single("SMALL-A", tiny_data, tiny_config.replace(teacher_alphas=(1.0, 0.5)), seed=0)
    assert ck.meta["alpha"] in (1.0, 0.5)


def test_zero_epochs_is_noop(tiny_config, tiny_data):
    ck = harness.train_single("BIG-A", tiny_data, tiny_config.replace(teacher_epochs=0.0), seed=4)
    fresh = harness.new_model(["BIG-A"], tiny_data, tiny_config, 4)
    assert params_equal(ck.model.params, fresh.params)
    assert ck.history["steps"] == 0


def test_unknown_task(tiny_config, tiny_data):
    with pytest.raises(KeyError):
        harness.train_single("NOPE", tiny_data, tiny_config, 0)


def test_annealing_endpoints_logged(tiny_config, tiny_data, teachers):
    ta = distill.TeacherAssignment.single({t: c.model for t, c in teachers.items()})
    ck = harness.train_multi(tiny_config.tasks, tiny_data, tiny_config, ta, "on", seed=0)
    lam = ck.history["lambda"]
    assert lam[0] == 0.0 and lam[-1] == 1.0
    assert len(lam) == ck.history["steps"]


def test_no_teachers_equals_lambda_one(tiny_config, tiny_data, teachers):
    ta = distill.TeacherAssignment.single({t: c.model for t, c in teachers.items()})
    a = harness.train_multi(tiny_config.tasks, tiny_data, tiny_config, None, "on", seed=5)
    b = harness.train_multi(tiny_config.tasks, tiny_data, tiny_config, ta, 1.0, seed=5)
    assert a.history["loss"] == b.history["loss"]
    assert params_equal(a.model.params, b.model.params)


def test_missing_teacher_rejected_before_training(tiny_config, tiny_data, teachers):
    partial = distill.TeacherAssignment.single({"BIG-A": teachers["BIG-A"].model})
    with pytest.raises(KeyError):
        harness.train_multi(tiny_config.tasks, tiny_data, tiny_config, partial)


def test_divergence_raises(tiny_config, tiny_data, monkeypatch):
    monkeypatch.setattr(distill, "batch_loss", lambda *a, **k: T.constant(np.array(math.nan)))
    with pytest.raises(harness.TrainingDiverged):
        harness.train_multi(["MED-B"], tiny_data, tiny_config)


def test_finetune_freezes_other_heads(tiny_config, tiny_data):
    base = harness.train_multi(tiny_config.tasks, tiny_data, tiny_config, seed=2)
    tuned = harness.finetune_single(base, "SMALL-A", tiny_data, tiny_config, seed=1, epochs=1.0)
    for n, p in base.model.params.items():
        same = p.tobytes() == tuned.model.params[n].tobytes()
        assert same == (n.startswith("head.") and n != "head.SMALL-A"), n
    assert tuned.meta["base"] == base.content_hash()
    noop = harness.finetune_single(base, "SMALL-A", tiny_data, tiny_config, epochs=0.0)
    assert noop.content_hash() == base.content_hash()
    with pytest.raises(KeyError):
        harness.finetune_single(noop, "NOPE", tiny_data, tiny_config)


@pytest.mark.slow
def test_finetune_does_not_hurt_median(tiny_config, tiny_data):
    before, after = [], []
    for seed in range(5):
        base = harness.train_multi(tiny_config.tasks, tiny_data, tiny_config, seed=seed)
        tuned = harness.finetune_single(base, "SMALL-A", tiny_data, tiny_config, seed=seed)
        before.append(100 * harness.dev_scores(base.model, tiny_data, ["SMALL-A"])["SMALL-A"])
        after.append(100 * harness.dev_scores(tuned.model, tiny_data, ["SMALL-A"])["SMALL-A"])
    assert statistics.median(after) >= statistics.median(before) - 1.0


# method names


@pytest.mark.parametrize(
    "text,name,mode",
    [
        ("Single", "Single", distill.NONE),
        ("Single→Multi", "Single->Multi", distill.SINGLE_TEACHERS),
        ("Multi->Multi", "Multi->Multi", distill.MULTI_TEACHER),
        ("Single->Multi->Single->Multi", "Single->Multi->Single->Multi", distill.SINGLE_TEACHERS),
        ("Single->Multi[lambda=0]", "Single->Multi[lambda=0]", distill.SINGLE_TEACHERS),
        ("Single->Multi[lambda=0.5,no-layerwise-lr]{SMALL-A,BIG-A}+FT",
         "Single->Multi[lambda=0.5,no-layerwise-lr]{SMALL-A,BIG-A}+FT", distill.SINGLE_TEACHERS),
        ("Multi[no-task-sampling]", "Multi[no-task-sampling]", distill.NONE),
    ],
)
def test_parse_method(text, name, mode):
    spec = harness.parse_method(text)
    assert spec.name == name and spec.teacher_mode == mode
    assert harness.parse_method(spec.name) == spec


@pytest.mark.parametrize("bad", ["Double", "Single->", "Multi[lambda=0]", "Single->Multi[lambda=2]", "Single[bogus]"])
def test_parse_method_rejects(bad):
    with pytest.raises(ValueError):
        harness.parse_method(bad)


# cells and matrices


def test_multi_equals_single_multi_lambda_one(tiny_config):
    store = harness.ModelStore()
    a = harness.run_cell("Multi", 0, tiny_config, store)
    b = harness.run_cell("Single->Multi[lambda=1]", 0, tiny_config, store)
    assert a.scores == b.scores and a.status == b.status == "ok"


def test_cell_is_reproducible(tiny_config):
    a = harness.run_cell("Single->Multi", 1, tiny_config)
    b = harness.run_cell("Single->Multi", 1, tiny_config)
    assert a.row(tiny_config.tasks) == b.row(tiny_config.tasks)
    assert a.teachers.count("S1/") == len(tiny_config.tasks)


def test_chained_provenance(tiny_config):
    store = harness.ModelStore()
    res = harness.run_cell("Single->Multi->Single->Multi", 0, tiny_config, store)
    assert res.status == "ok"
    labels = [kv.split("=")[0] for kv in res.teachers.split(";")]
    n = len(tiny_config.tasks)
    assert labels == [f"S1/{t}" for t in tiny_config.tasks] + ["M1"] + [f"S2/{t}" for t in tiny_config.tasks]
    assert len(labels) == 2 * n + 1
    # the first two stages are shared with plain Single->Multi
    sm = harness.run_cell("Single->Multi", 0, tiny_config, store)
    assert res.teachers.startswith(sm.teachers)


def test_failed_cell_is_recorded(tiny_config, tmp_path, monkeypatch):
    real = distill.batch_loss

    def flaky(student, teachers, batch, lam, bound=None):
        if "MED-B" in student.task_specs and len(student.task_specs) == 1:
            return T.constant(np.array(math.inf))
        return real(student, teachers, batch, lam, bound)

    monkeypatch.setattr(distill, "batch_loss", flaky)
    rows = harness.run_matrix(tiny_config, tmp_path, ["Single", "Multi"], [0])
    single, multi = rows
    assert single.status == "failed" and "TrainingDiverged" in single.reason
    assert multi.status == "ok"
    text = open(tmp_path / "results.tsv").read()
    assert "\tfailed\t" in text


def test_unknown_task_subset_fails_cell(tiny_config):
    res = harness.run_cell("Multi{SMALL-A,NOPE}", 0, tiny_config)
    assert res.status == "failed" and "NOPE" in res.reason


@pytest.mark.slow
def test_matrix_idempotent_and_parallel_identical(tiny_config, tmp_path):
    methods = ["Single", "Multi", "Single->Multi"]
    seeds = [0, 1]
    harness.run_matrix(tiny_config, tmp_path / "p1", methods, seeds, parallel=1)
    first = (tmp_path / "p1" / "results.tsv").read_bytes()
    harness.run_matrix(tiny_config, tmp_path / "p1", methods, seeds, parallel=1)
    assert (tmp_path / "p1" / "results.tsv").read_bytes() == first
    harness.run_matrix(tiny_config, tmp_path / "p4", methods, seeds, parallel=4, cache=False)
    assert filecmp.cmp(tmp_path / "p1" / "results.tsv", tmp_path / "p4" / "results.tsv", shallow=False)
    assert len(harness.read_timings(tmp_path / "p4" / "results.timing.tsv")) == 6


def test_resume_after_partial_write(tiny_config, tmp_path):
    harness.run_matrix(tiny_config, tmp_path, ["Single"], [0, 1])
    path = tmp_path / "results.tsv"
    full = path.read_bytes()
    lines = full.split(b"\n")
    # kill mid-append: second row half written, no newline
    path.write_bytes(b"\n".join(lines[:2]) + b"\n" + lines[2][:10])
    assert len(harness.read_results(path)) == 1
    harness.run_matrix(tiny_config, tmp_path, ["Single"], [0, 1])
    assert path.read_bytes() == full
    with pytest.raises(FileExistsError):
        harness.run_matrix(tiny_config, tmp_path, ["Single"], [0], resume=False)


def test_store_survives_corrupt_cache(tiny_config, tmp_path):
    store = harness.ModelStore(tmp_path)
    ck = store.get("k", lambda: harness.train_multi(["MED-B"], harness.load_datasets(tiny_config), tiny_config))
    (f,) = list(tmp_path.glob("*.ckpt"))
    f.write_bytes(f.read_bytes()[:50])
    again = harness.ModelStore(tmp_path).get("k", lambda: ck)
    assert again.content_hash() == ck.content_hash()
    assert M.load(f).content_hash() == ck.content_hash()
