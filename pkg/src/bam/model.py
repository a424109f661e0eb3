"""Shared-trunk multi-task model and its checkpoint format."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

CLASSIFICATION = "classification"
REGRESSION = "regression"
METRICS = ("accuracy", "matthews", "spearman")

MAGIC = b"BAMCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TaskMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    kind: str
    num_classes: int = 2
    metric: str = "accuracy"
    train_size: int = 0

    def __post_init__(self):
        if self.kind not in (CLASSIFICATION, REGRESSION):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == CLASSIFICATION and self.num_classes < 2:
            raise ValueError(f"{self.task_id}: classification needs K >= 2")
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    @property
    def out_dim(self):
        return self.num_classes if self.kind == CLASSIFICATION else 1


@dataclass
class Dataset:
    spec: TaskSpec
    train_x: np.ndarray
    train_y: np.ndarray
    dev_x: np.ndarray
    dev_y: np.ndarray
    train_index: np.ndarray | None = None
    dev_index: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_x = np.asarray(self.train_x, dtype=np.float64)
        self.dev_x = np.asarray(self.dev_x, dtype=np.float64)
        self.train_y = np.asarray(self.train_y, dtype=np.float64)
        self.dev_y = np.asarray(self.dev_y, dtype=np.float64)
        if len(self.train_x) == 0:
            raise ValueError(f"{self.spec.task_id}: empty train split")
        if self.train_x.shape[1] != self.dev_x.shape[1] and len(self.dev_x):
            raise ValueError(f"{self.spec.task_id}: train/dev feature widths differ")
        for name, y in (("train", self.train_y), ("dev", self.dev_y)):
            if self.spec.kind == CLASSIFICATION:
                if np.any((y < 0) | (y >= self.spec.num_classes) | (y != np.round(y))):
                    raise ValueError(f"{self.spec.task_id}: {name} labels outside [0, K)")
            elif np.any((y < 0) | (y > 1)):
                raise ValueError(f"{self.spec.task_id}: {name} regression labels outside [0, 1]")

    @property
    def task_id(self):
        return self.spec.task_id

    @property
    def width(self):
        return self.train_x.shape[1]


class MultiTaskModel:
    """Dense tanh trunk shared by every task plus one small head per task.

    Parameters live in ``params`` keyed by name. Depth 0 is the heads;
    trunk layer ``i`` (0 nearest the input) of ``L`` layers has depth
    ``L - i``.
    """

    def __init__(self, input_width, hidden, task_specs, params=None, norm=None):
        self.input_width = int(input_width)
        self.hidden = tuple(int(h) for h in hidden)
        self.task_specs = {}
        for spec in task_specs:
            if spec.task_id in self.task_specs:
                raise ValueError(f"duplicate task_id {spec.task_id!r}")
            self.task_specs[spec.task_id] = spec
        if not self.task_specs:
            raise ValueError("model needs at least one task")
        self.params = params if params is not None else {}
        self.norm = dict(norm or {})

    @property
    def task_ids(self):
        return list(self.task_specs)

    @property
    def num_layers(self):
        return len(self.hidden)

    def param_shapes(self):
        shapes = {}
        widths = (self.input_width,) + self.hidden
        for i in range(len(self.hidden)):
            shapes[f"trunk.{i}.weight"] = (widths[i], widths[i + 1])
            shapes[f"trunk.{i}.bias"] = (widths[i + 1],)
        for tid, spec in self.task_specs.items():
            shapes[f"head.{tid}"] = (widths[-1], spec.out_dim)
        return shapes

    def depth(self, name):
        if name.startswith("head."):
            return 0
        return self.num_layers - int(name.split(".")[1])

    def head_name(self, task_id):
        return f"head.{task_id}"

    def copy(self):
        return MultiTaskModel(
            self.input_width,
            self.hidden,
            self.task_specs.values(),
            {k: v.copy() for k, v in self.params.items()},
            self.norm,
        )

    def spec(self, task_id):
        try:
            return self.task_specs[task_id]
        except KeyError:
            raise KeyError(f"unknown task {task_id!r}") from None

    # label normalization for regression heads

    def set_normalization(self, task_id, labels):
        lo, hi = float(np.min(labels)), float(np.max(labels))
        self.norm[task_id] = (lo, hi)

    def normalize(self, task_id, y):
        if self.spec(task_id).kind != REGRESSION or task_id not in self.norm:
            return np.asarray(y, dtype=np.float64)
        lo, hi = self.norm[task_id]
        if hi <= lo:
            return np.full(np.shape(y), 0.5)
        return np.clip((np.asarray(y, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)

    def denormalize(self, task_id, p):
        if self.spec(task_id).kind != REGRESSION or task_id not in self.norm:
            return p
        lo, hi = self.norm[task_id]
        return lo + p * (hi - lo)

    # graph construction

    def bind(self, tape=None, trainable=None):
        """Wrap parameters as tensors; on a tape they become gradient leaves."""
        out = {}
        for name, value in self.params.items():
            if tape is None or (trainable is not None and name not in trainable):
                out[name] = T.constant(value)
            else:
                out[name] = tape.leaf(value)
        return out

    def trunk(self, bound, x):
        h = x
        for i in range(self.num_layers):
            h = T.tanh(T.add_bias(T.matmul(h, bound[f"trunk.{i}.weight"]), bound[f"trunk.{i}.bias"]))
        return h

    def head(self, bound, c, task_id):
        spec = self.spec(task_id)
        z = T.matmul(c, bound[self.head_name(task_id)])
        if spec.kind == CLASSIFICATION:
            return T.softmax_rows(z)
        return T.reshape(T.sigmoid(z), (z.shape[0],))


def init_model(task_specs, seed, input_width=32, hidden=(64, 64)):
    """Glorot-uniform trunk, zero heads. Deterministic in ``seed``."""
    model = MultiTaskModel(input_width, hidden, list(task_specs))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 0x1417])))
    for name, shape in model.param_shapes().items():
        if name.startswith("head."):
            model.params[name] = np.zeros(shape)
        elif name.endswith(".bias"):
            model.params[name] = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            model.params[name] = rng.uniform(-bound, bound, size=shape)
    return model


def forward(model, x, task_id):
    """Predictions without gradient tracking.

    Returns an ``n x K`` probability matrix for classification tasks (a
    length-K vector for a single input) and values in (0, 1) for
    regression.
    """
    model.spec(task_id)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != model.input_width:
        raise T.ShapeError(f"input width {x.shape[1]} != model width {model.input_width}")
    bound = model.bind()
    out = model.head(bound, model.trunk(bound, T.constant(x)), task_id).data
    return out[0] if single else out


# checkpoints


@dataclass
class Checkpoint:
    model: MultiTaskModel
    seed: int = 0
    config_digest: str = ""
    meta: dict = field(default_factory=dict)
    history: dict = field(default_factory=dict, repr=False, compare=False)

    def content_hash(self):
        return model_hash(self.model)


def model_hash(model):
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def _as_checkpoint(obj):
    return obj if isinstance(obj, Checkpoint) else Checkpoint(obj)


def dumps(ckpt):
    ckpt = _as_checkpoint(ckpt)
    m = ckpt.model
    names = list(m.params)
    header = {
        "input_width": m.input_width,
        "hidden": list(m.hidden),
        "tasks": [
            {"id": s.task_id, "kind": s.kind, "K": s.num_classes, "metric": s.metric, "train_size": s.train_size}
            for s in m.task_specs.values()
        ],
        "norm": {k: list(v) for k, v in m.norm.items()},
        "params": [{"name": n, "shape": list(m.params[n].shape)} for n in names],
        "seed": int(ckpt.seed),
        "config_digest": ckpt.config_digest,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<II", FORMAT_VERSION, len(hbytes)) + hbytes
    body += b"".join(np.ascontiguousarray(m.params[n], dtype="<f8").tobytes() for n in names)
    return body + hashlib.sha256(body).digest()


def loads(blob, expect_tasks=None):
    if len(blob) < len(MAGIC) + 8 + 32:
        raise CheckpointError("checksum mismatch: file too short")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is corrupted or truncated")
    if not body.startswith(MAGIC):
        raise CheckpointError("bad magic bytes")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint format version {version}")
    off = len(MAGIC) + 8
    header = json.loads(body[off : off + hlen].decode("utf-8"))
    off += hlen
    specs = [TaskSpec(t["id"], t["kind"], t["K"], t["metric"], t["train_size"]) for t in header["tasks"]]
    if expect_tasks is not None and sorted(expect_tasks) != sorted(s.task_id for s in specs):
        raise TaskMismatchError(
            f"checkpoint tasks {[s.task_id for s in specs]} do not match expected {list(expect_tasks)}"
        )
    params = {}
    for p in header["params"]:
        shape = tuple(p["shape"])
        n = int(np.prod(shape)) if shape else 1
        params[p["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 8 * n
    if off != len(body):
        raise CheckpointError("parameter blob length does not match header")
    norm = {k: tuple(v) for k, v in header["norm"].items()}
    model = MultiTaskModel(header["input_width"], header["hidden"], specs, params, norm)
    return Checkpoint(model, header["seed"], header["config_digest"], header.get("meta", {}))


def save(ckpt, path):
    with open(path, "wb") as f:
        f.write(dumps(ckpt))


def load(path, expect_tasks=None):
    with open(path, "rb") as f:
        return loads(f.read(), expect_tasks)
