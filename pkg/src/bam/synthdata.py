"""Synthetic multi-task suites with controllable relatedness and size skew.

Every task reads out one direction of a latent map ``z = tanh(x A + b)``
shared by the whole suite. A *related* task reuses its parent's direction
up to a small perturbation; an *independent* task gets a direction whose
projection is decorrelated from the earlier tasks on a calibration sample.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .model import CLASSIFICATION, REGRESSION, Dataset, TaskSpec
from .sampling import rng_stream

CALIBRATION_SIZE = 10_000


@dataclass(frozen=True)
class SyntheticTaskSpec:
    task_id: str
    kind: str = CLASSIFICATION
    train_size: int = 1000
    dev_size: int = 1000
    num_classes: int = 2
    metric: str = "accuracy"
    related_to: str | None = None
    perturbation: float = 0.2
    noise: float = 0.1

    def task_spec(self):
        k = self.num_classes if self.kind == CLASSIFICATION else 1
        return TaskSpec(self.task_id, self.kind, max(k, 2) if self.kind == CLASSIFICATION else 1,
                        self.metric, self.train_size)


@dataclass(frozen=True)
class SuiteConfig:
    tasks: tuple
    input_width: int = 32
    latent_width: int = 8


def default_suite_config(**overrides):
    tasks = (
        SyntheticTaskSpec("BIG-A", train_size=20_000),
        SyntheticTaskSpec("SMALL-A", train_size=500, related_to="BIG-A"),
        SyntheticTaskSpec("MED-B", train_size=2_000, metric="matthews"),
        SyntheticTaskSpec("REG-C", kind=REGRESSION, train_size=2_000, metric="spearman", noise=0.0),
    )
    return replace(SuiteConfig(tasks), **overrides)


class LatentGenerator:
    def __init__(self, input_width, latent_width, seed):
        rng = rng_stream(seed, "latent")
        self.weight = rng.normal(0.0, 1.5 / np.sqrt(input_width), size=(input_width, latent_width))
        self.bias = rng.normal(0.0, 0.5, size=latent_width)

    def __call__(self, x):
        return np.tanh(x @ self.weight + self.bias)


@dataclass
class Suite:
    config: SuiteConfig
    seed: int
    generator: LatentGenerator
    directions: dict
    thresholds: dict
    ranges: dict
    datasets: dict = field(default_factory=dict)

    @property
    def specs(self):
        return [d.spec for d in self.datasets.values()]

    def task(self, task_id):
        return next(t for t in self.config.tasks if t.task_id == task_id)

    def projection(self, task_id, x):
        return self.generator(np.asarray(x, dtype=np.float64)) @ self.directions[task_id]

    def clean_labels(self, task_id, x):
        """Noiseless labels for arbitrary inputs."""
        s = self.projection(task_id, x)
        t = self.task(task_id)
        if t.kind == REGRESSION:
            lo, hi = self.ranges[task_id]
            return np.clip((s - lo) / (hi - lo), 0.0, 1.0)
        return np.searchsorted(self.thresholds[task_id], s, side="right").astype(np.float64)

    def draw_inputs(self, n, stream="fresh"):
        return rng_stream(self.seed, "inputs", stream).normal(size=(n, self.config.input_width))


def _validate(config):
    ids = [t.task_id for t in config.tasks]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate task ids in suite: {ids}")
    if not ids:
        raise ValueError("suite needs at least one task")
    for t in config.tasks:
        if not 0.0 <= t.noise < 0.5:
            raise ValueError(f"{t.task_id}: noise rate {t.noise} outside [0, 0.5)")
        if t.train_size < 1 or t.dev_size < 0:
            raise ValueError(f"{t.task_id}: invalid split sizes")
        if t.related_to is not None and t.related_to not in ids[: ids.index(t.task_id)]:
            raise ValueError(f"{t.task_id}: related_to must name an earlier task")


def gen_suite(config=None, seed=0):
    config = config or default_suite_config()
    _validate(config)
    gen = LatentGenerator(config.input_width, config.latent_width, seed)
    calib = gen(rng_stream(seed, "calibration").normal(size=(CALIBRATION_SIZE, config.input_width)))
    cov = np.cov(calib, rowvar=False)
    directions, thresholds, ranges = {}, {}, {}
    independent = []
    for t in config.tasks:
        rng = rng_stream(seed, "head", t.task_id)
        if t.related_to is not None:
            base = directions[t.related_to]
            noise = rng.normal(size=base.shape)
            noise -= (noise @ base) * base
            u = base + t.perturbation * noise / np.linalg.norm(noise)
        else:
            u = rng.normal(size=config.latent_width)
            # Gram-Schmidt in the latent covariance metric: decorrelated projections
            for v in independent:
                u -= (u @ cov @ v) / (v @ cov @ v) * v
            independent.append(u / np.linalg.norm(u))
        directions[t.task_id] = u / np.linalg.norm(u)
        s = calib @ directions[t.task_id]
        if t.kind == CLASSIFICATION:
            thresholds[t.task_id] = np.quantile(s, np.arange(1, t.num_classes) / t.num_classes)
    suite = Suite(config, seed, gen, directions, thresholds, ranges)

    for t in config.tasks:
        rng = rng_stream(seed, "inputs", t.task_id)
        n = t.train_size + t.dev_size
        x = rng.normal(size=(n, config.input_width))
        s = suite.projection(t.task_id, x)
        if t.kind == REGRESSION:
            ranges[t.task_id] = (float(s.min()), float(s.max()))
            y = suite.clean_labels(t.task_id, x)
        else:
            y = suite.clean_labels(t.task_id, x)
            flip = rng_stream(seed, "noise", t.task_id).random(n) < t.noise
            if flip.any():
                shift = rng_stream(seed, "noise-shift", t.task_id).integers(1, t.num_classes, size=n)
                y = np.where(flip, (y + shift) % t.num_classes, y)
        idx = np.arange(n)
        meta = {
            "dev_size": t.dev_size,
            "noise": t.noise,
            "related_to": t.related_to or "",
            "perturbation": t.perturbation,
            "generator_seed": seed,
        }
        suite.datasets[t.task_id] = Dataset(
            t.task_spec(),
            x[: t.train_size],
            y[: t.train_size],
            x[t.train_size :],
            y[t.train_size :],
            idx[: t.train_size],
            idx[t.train_size :],
            meta,
        )
    return suite


# dataset files


def _fmt(v):
    return repr(float(v))


def write_dataset(dataset, directory):
    """Write ``<task>.tsv`` (one example per line) and ``<task>.meta``."""
    os.makedirs(directory, exist_ok=True)
    spec = dataset.spec
    width = dataset.width
    path = os.path.join(directory, f"{spec.task_id}.tsv")
    header = "\t".join(["split", "index"] + [f"x{i}" for i in range(width)] + ["label"])
    lines = [header]
    for split, xs, ys, idx in (
        ("train", dataset.train_x, dataset.train_y, dataset.train_index),
        ("dev", dataset.dev_x, dataset.dev_y, dataset.dev_index),
    ):
        if idx is None:
            idx = np.arange(len(xs))
        for i, x, y in zip(idx, xs, ys):
            lines.append("\t".join([split, str(int(i))] + [_fmt(v) for v in x] + [_fmt(y)]))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
    meta = {
        "id": spec.task_id,
        "kind": spec.kind,
        "K": spec.num_classes,
        "metric": spec.metric,
        "train_size": len(dataset.train_x),
        "input_width": width,
        **dataset.meta,
    }
    with open(os.path.join(directory, f"{spec.task_id}.meta"), "w", encoding="utf-8", newline="\n") as f:
        f.write("".join(f"{k}={v}\n" for k, v in meta.items()))
    return path


def _read_meta(path):
    meta = {}
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def read_dataset(path):
    """Read a dataset written by :func:`write_dataset` (path to the ``.tsv``)."""
    meta = _read_meta(os.path.splitext(path)[0] + ".meta")
    spec = TaskSpec(meta["id"], meta["kind"], int(meta["K"]), meta["metric"], int(meta["train_size"]))
    width = int(meta["input_width"])
    ncol = width + 3
    rows = {"train": ([], [], []), "dev": ([], [], [])}
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if len(header) != ncol or header[0] != "split" or header[-1] != "label":
            raise ValueError(f"{path}:1: bad header")
        for n, line in enumerate(f, 2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != ncol:
                raise ValueError(f"{path}:{n}: expected {ncol} columns (features and label), got {len(parts)}")
            if parts[0] not in rows:
                raise ValueError(f"{path}:{n}: unknown split {parts[0]!r}")
            try:
                idx = int(parts[1])
                vals = [float(v) for v in parts[2:]]
            except ValueError as e:
                raise ValueError(f"{path}:{n}: {e}") from None
            xs, ys, ids = rows[parts[0]]
            xs.append(vals[:-1])
            ys.append(vals[-1])
            ids.append(idx)
    (tx, ty, ti), (dx, dy, di) = rows["train"], rows["dev"]
    if not tx:
        raise ValueError(f"{path}: empty train split")
    extra = {
        k: meta[k] for k in ("dev_size", "noise", "related_to", "perturbation", "generator_seed") if k in meta
    }
    for k in ("dev_size", "generator_seed"):
        if k in extra:
            extra[k] = int(extra[k])
    for k in ("noise", "perturbation"):
        if k in extra:
            extra[k] = float(extra[k])
    return Dataset(
        spec,
        np.array(tx),
        np.array(ty),
        np.array(dx).reshape(-1, width),
        np.array(dy),
        np.array(ti, dtype=np.int64),
        np.array(di, dtype=np.int64),
        extra,
    )


def write_suite(suite, directory):
    return [write_dataset(ds, directory) for ds in suite.datasets.values()]


def read_suite(directory, task_ids=None):
    """Read every ``*.tsv`` dataset in ``directory`` (in ``task_ids`` order if given)."""
    if task_ids is None:
        names = sorted(f[:-4] for f in os.listdir(directory) if f.endswith(".tsv"))
    else:
        names = list(task_ids)
    return {n: read_dataset(os.path.join(directory, f"{n}.tsv")) for n in names}
