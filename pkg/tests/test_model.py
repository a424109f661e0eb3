import numpy as np
import pytest

from bam import model as M

SPECS = [
    M.TaskSpec("a", M.CLASSIFICATION, 3),
    M.TaskSpec("b", M.CLASSIFICATION, 2),
    M.TaskSpec("r", M.REGRESSION, 1, "spearman"),
]


@pytest.fixture
def trained_like():
    """A model with nonzero heads, as after training."""
    m = M.init_model(SPECS, seed=3, input_width=6, hidden=(5, 4))
    rng = np.random.default_rng(0)
    for name in m.params:
        m.params[name] = m.params[name] + rng.normal(scale=0.3, size=m.params[name].shape)
    m.norm["r"] = (-1.5, 2.0)
    return m


def test_init_is_deterministic():
    a = M.init_model(SPECS, 7, 6, (5, 4))
    b = M.init_model(SPECS, 7, 6, (5, 4))
    assert all(np.array_equal(a.params[n], b.params[n]) for n in a.params)
    c = M.init_model(SPECS, 8, 6, (5, 4))
    assert not np.array_equal(a.params["trunk.0.weight"], c.params["trunk.0.weight"])


def test_init_glorot_bounds_and_zero_heads():
    m = M.init_model(SPECS, 0, 32, (64, 64))
    w = m.params["trunk.0.weight"]
    assert np.abs(w).max() <= np.sqrt(6 / (32 + 64))
    assert all(not m.params[f"head.{t}"].any() for t in "abr")


def test_zero_heads_give_uniform_and_half():
    m = M.init_model(SPECS, 0, 6, (5, 4))
    x = np.random.default_rng(0).normal(size=(4, 6))
    assert np.allclose(M.forward(m, x, "a"), 1 / 3, atol=1e-15)
    assert np.all(M.forward(m, x, "r") == 0.5)


def test_duplicate_and_unknown_tasks():
    with pytest.raises(ValueError, match="duplicate"):
        M.init_model([SPECS[0], SPECS[0]], 0)
    m = M.init_model(SPECS, 0, 6, (5, 4))
    with pytest.raises(KeyError):
        M.forward(m, np.zeros(6), "nope")


def test_forward_outputs(trained_like):
    x = np.random.default_rng(1).normal(size=(10, 6))
    p = M.forward(trained_like, x, "a")
    assert p.shape == (10, 3) and np.allclose(p.sum(axis=1), 1, atol=1e-12)
    r = M.forward(trained_like, x, "r")
    assert np.all((r > 0) & (r < 1))
    assert M.forward(trained_like, x[0], "a").shape == (3,)
    assert np.array_equal(M.forward(trained_like, x, "a"), p)


def test_shared_trunk_identical_heads(trained_like):
    m = M.MultiTaskModel(6, (5, 4), [M.TaskSpec("p", M.CLASSIFICATION), M.TaskSpec("q", M.CLASSIFICATION)],
                         {k: v for k, v in trained_like.params.items() if k.startswith("trunk")})
    head = np.random.default_rng(2).normal(size=(4, 2))
    m.params["head.p"], m.params["head.q"] = head, head.copy()
    x = np.random.default_rng(3).normal(size=(7, 6))
    assert np.array_equal(M.forward(m, x, "p"), M.forward(m, x, "q"))


def test_head_change_does_not_touch_other_tasks(trained_like):
    x = np.random.default_rng(4).normal(size=(7, 6))
    before = {t: M.forward(trained_like, x, t) for t in "abr"}
    trained_like.params["head.a"] += 1.0
    assert np.array_equal(M.forward(trained_like, x, "b"), before["b"])
    assert np.array_equal(M.forward(trained_like, x, "r"), before["r"])
    assert not np.array_equal(M.forward(trained_like, x, "a"), before["a"])


def test_born_again_shapes(trained_like):
    student = M.init_model(SPECS, 99, 6, (5, 4))
    assert {n: p.shape for n, p in student.params.items()} == {n: p.shape for n, p in trained_like.params.items()}


def test_depths():
    m = M.init_model(SPECS, 0, 6, (5, 4, 3))
    assert m.depth("head.a") == 0
    assert m.depth("trunk.2.weight") == 1
    assert m.depth("trunk.0.bias") == 3


def test_save_load_roundtrip(trained_like, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(M.Checkpoint(trained_like, seed=5, config_digest="abc", meta={"k": 1}), path)
    ck = M.load(path)
    assert ck.seed == 5 and ck.config_digest == "abc" and ck.meta == {"k": 1}
    for n, p in trained_like.params.items():
        assert ck.model.params[n].tobytes() == p.tobytes()
    assert ck.model.norm == trained_like.norm
    assert ck.model.task_specs == trained_like.task_specs


def test_truncated_file_fails_checksum(trained_like, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(trained_like, path)
    data = path.read_bytes()
    path.write_bytes(data[:-100])
    with pytest.raises(M.CheckpointError, match="checksum"):
        M.load(path)


def test_flipped_byte_fails_checksum(trained_like):
    blob = bytearray(M.dumps(trained_like))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(M.CheckpointError, match="checksum"):
        M.loads(bytes(blob))


def test_unknown_version_rejected(trained_like):
    import hashlib
    import struct

    body = bytearray(M.dumps(trained_like)[:-32])
    struct.pack_into("<I", body, len(M.MAGIC), 99)
    blob = bytes(body) + hashlib.sha256(body).digest()
    with pytest.raises(M.CheckpointError, match="version"):
        M.loads(blob)


def test_task_mismatch(trained_like, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(trained_like, path)
    with pytest.raises(M.TaskMismatchError):
        M.load(path, expect_tasks=["a", "b"])
    assert M.load(path, expect_tasks=["r", "b", "a"]).model.task_ids == ["a", "b", "r"]


def test_regression_normalization_roundtrip(trained_like):
    y = np.array([-1.5, 0.25, 2.0])
    n = trained_like.normalize("r", y)
    assert n.min() == 0.0 and n.max() == 1.0
    assert np.allclose(trained_like.denormalize("r", n), y)


def test_dataset_validation():
    spec = M.TaskSpec("t", M.CLASSIFICATION, 2)
    with pytest.raises(ValueError, match="empty"):
        M.Dataset(spec, np.zeros((0, 3)), np.zeros(0), np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError, match="labels"):
        M.Dataset(spec, np.zeros((2, 3)), np.array([0, 2]), np.zeros((1, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        M.TaskSpec("t", M.CLASSIFICATION, 1)
