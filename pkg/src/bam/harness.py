"""Experiment orchestration: teachers, students, fine-tuning and seed matrices."""

from __future__ import annotations

import functools
import hashlib
import logging
import math
import multiprocessing
import os
import re
import time
from dataclasses import dataclass, field, replace

from . import distill, metrics, model as M, sampling, synthdata
from . import tensor as T
from .optim import Adam, OptimConfig

log = logging.getLogger(__name__)

SINGLE, MULTI = "Single", "Multi"


class TrainingDiverged(RuntimeError):
    pass


def derive_seed(seed, *keys):
    return int(sampling.rng_stream(seed, *keys).integers(0, 2**31 - 1))


# data


@functools.lru_cache(maxsize=8)
def _load_datasets(data_dir, data_seed, tasks, train_sizes, dev_size, input_width):
    if data_dir:
        return synthdata.read_suite(data_dir, tasks)
    base = synthdata.default_suite_config(input_width=input_width)
    sizes = dict(p.split(":") for p in train_sizes)
    specs = []
    for t in base.tasks:
        kw = {}
        if t.task_id in sizes:
            kw["train_size"] = int(sizes[t.task_id])
        if dev_size:
            kw["dev_size"] = dev_size
        specs.append(replace(t, **kw) if kw else t)
    suite = synthdata.gen_suite(replace(base, tasks=tuple(specs)), data_seed)
    missing = [t for t in tasks if t not in suite.datasets]
    if missing:
        raise KeyError(f"tasks {missing} not in the synthetic suite")
    return {t: suite.datasets[t] for t in tasks}


def load_datasets(config):
    return _load_datasets(
        config.data_dir, config.data_seed, tuple(config.tasks), tuple(config.train_sizes),
        config.dev_size, config.input_width,
    )


def new_model(tasks, datasets, config, seed):
    model = M.init_model([datasets[t].spec for t in tasks], seed, config.input_width, config.hidden)
    for t in tasks:
        if datasets[t].spec.kind == M.REGRESSION:
            model.set_normalization(t, datasets[t].train_y)
    return model


def dev_scores(model, datasets, tasks):
    return {t: metrics.evaluate(model, datasets[t]).value for t in tasks}


# training


def fit(model, tasks, datasets, *, lr, alpha, exponent, batch_size, epochs, seed,
        teachers=None, anneal="on", trainable=None, log_dev=True):
    """Train ``model`` in place on mixed batches of ``tasks``; return the history.

    ``anneal`` is ``"on"`` (lambda rises linearly over every optimizer
    step) or a fixed lambda in [0, 1]. Without teachers it is ignored.
    """
    teachers = teachers or distill.TeacherAssignment.none()
    teachers.validate(model, tasks)
    sizes = [len(datasets[t].train_x) for t in tasks]
    steps = sampling.total_steps(sizes, batch_size, epochs) if epochs > 0 else 0
    history = {"loss": [], "lambda": [], "dev": [], "steps": steps}
    if steps == 0:
        return history
    teachers.precompute({t: datasets[t] for t in tasks})
    sampler = sampling.TaskSampler(tasks, sizes, exponent, seed)
    names = list(model.params) if trainable is None else [n for n in model.params if n in trainable]
    opt = Adam(OptimConfig(base_lr=lr, alpha=alpha), {n: model.depth(n) for n in names})
    schedule = distill.AnnealSchedule(steps)
    per_epoch = math.ceil(sum(sizes) / batch_size)
    sub = {t: datasets[t] for t in tasks}
    for step in range(steps):
        lam = distill.lambda_at(step, schedule) if anneal == "on" else float(anneal)
        batch = sampling.sample_batch(sampler, sub, batch_size)
        tape = T.Tape()
        bound = model.bind(tape, trainable)
        loss = distill.batch_loss(model, teachers, batch, lam, bound)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss {value} at step {step}")
        grads = T.backward(loss, tape)
        opt.step(model.params, {n: grads[t.index] for n, t in bound.items() if t.index in grads})
        history["loss"].append(value)
        history["lambda"].append(lam)
        if log_dev and ((step + 1) % per_epoch == 0 or step + 1 == steps):
            history["dev"].append((step + 1, dev_scores(model, datasets, tasks)))
    return history


def _checkpoint(model, config, seed, history, **meta):
    return M.Checkpoint(model, seed, config.digest(), meta, history)


def train_single(task, datasets, config, seed, teachers=None, anneal="on", alpha=None):
    """Single-task model on ``task``; picks the layerwise decay by dev score when ``alpha`` is None."""
    if task not in datasets:
        raise KeyError(f"unknown task {task!r}")
    alphas = (alpha,) if alpha is not None else tuple(config.teacher_alphas)
    best = None
    for a in alphas:
        model = new_model([task], datasets, config, seed)
        hist = fit(model, [task], datasets, lr=config.teacher_lr, alpha=a, exponent=config.exponent,
                   batch_size=config.teacher_batch_size, epochs=config.teacher_epochs, seed=seed,
                   teachers=teachers, anneal=anneal)
        score = metrics.evaluate(model, datasets[task]).value
        if best is None or score > best[0]:
            best = (score, a, model, hist)
    _, a, model, hist = best
    return _checkpoint(model, config, seed, hist, kind=SINGLE, tasks=[task], alpha=a)


def train_multi(tasks, datasets, config, teachers=None, anneal="on", seed=0, alpha=None, exponent=None):
    """Multi-task student over ``tasks``, distilled from ``teachers`` when given."""
    tasks = list(tasks)
    model = new_model(tasks, datasets, config, seed)
    a = config.alpha if alpha is None else alpha
    e = config.exponent if exponent is None else exponent
    hist = fit(model, tasks, datasets, lr=config.base_lr, alpha=a, exponent=e, batch_size=config.batch_size,
               epochs=config.epochs, seed=seed, teachers=teachers, anneal=anneal)
    return _checkpoint(model, config, seed, hist, kind=MULTI, tasks=tasks, alpha=a, exponent=e)


def finetune_single(ckpt, task, datasets, config, seed=0, epochs=None):
    """Continue supervised training of one task; every other head is frozen."""
    model = ckpt.model.copy()
    if task not in model.task_specs:
        raise KeyError(f"checkpoint has no head for task {task!r}")
    trainable = {n for n in model.params if not n.startswith("head.")} | {model.head_name(task)}
    hist = fit(model, [task], datasets, lr=config.base_lr * config.finetune_lr_factor, alpha=config.alpha,
               exponent=config.exponent, batch_size=config.teacher_batch_size,
               epochs=config.finetune_epochs if epochs is None else epochs, seed=seed, trainable=trainable)
    return _checkpoint(model, config, seed, hist, kind="finetune", tasks=[task], base=ckpt.content_hash())


# methods

_METHOD_RE = re.compile(
    r"^(?P<chain>[A-Za-z]+(?:->[A-Za-z]+)*)(?:\[(?P<mods>[^\]]*)\])?(?:\{(?P<tasks>[^}]*)\})?(?P<ft>\+FT)?$"
)


@dataclass(frozen=True)
class MethodSpec:
    """A row of the method grid, e.g. ``Single->Multi[lambda=0]{SMALL-A,BIG-A}+FT``.

    ``chain`` lists the training stages; each stage after the first is
    distilled from the previous one. Modifiers apply to the last stage.
    """

    chain: tuple
    anneal: object = "on"
    layerwise: bool = True
    task_sampling: bool = True
    tasks: tuple | None = None
    finetune: bool = False

    @property
    def name(self):
        mods = []
        if self.anneal != "on":
            mods.append(f"lambda={self.anneal:g}")
        if not self.layerwise:
            mods.append("no-layerwise-lr")
        if not self.task_sampling:
            mods.append("no-task-sampling")
        s = "->".join(self.chain)
        if mods:
            s += "[" + ",".join(mods) + "]"
        if self.tasks is not None:
            s += "{" + ",".join(self.tasks) + "}"
        return s + ("+FT" if self.finetune else "")

    @property
    def teacher_mode(self):
        if len(self.chain) == 1:
            return distill.NONE
        return distill.SINGLE_TEACHERS if self.chain[-2] == SINGLE else distill.MULTI_TEACHER


def parse_method(text):
    text = text.strip().replace("→", "->").replace(" ", "")
    m = _METHOD_RE.match(text)
    if not m:
        raise ValueError(f"cannot parse method name {text!r}")
    chain = tuple(m["chain"].split("->"))
    for stage in chain:
        if stage not in (SINGLE, MULTI):
            raise ValueError(f"unknown stage {stage!r} in method {text!r}")
    kw = {}
    for mod in filter(None, (m["mods"] or "").split(",")):
        if mod.startswith("lambda="):
            lam = float(mod.split("=", 1)[1])
            if not 0 <= lam <= 1:
                raise ValueError(f"fixed lambda {lam} outside [0, 1]")
            kw["anneal"] = lam
        elif mod == "no-layerwise-lr":
            kw["layerwise"] = False
        elif mod == "no-task-sampling":
            kw["task_sampling"] = False
        else:
            raise ValueError(f"unknown method modifier {mod!r}")
    if kw.get("anneal", "on") != "on" and len(chain) == 1:
        raise ValueError(f"{text!r}: fixed lambda needs a teacher stage")
    if m["tasks"] is not None:
        kw["tasks"] = tuple(t.strip() for t in m["tasks"].split(",") if t.strip())
    return MethodSpec(chain, finetune=bool(m["ft"]), **kw)


class ModelStore:
    """Memoizes trained stages in memory and, given a directory, on disk."""

    def __init__(self, directory=None):
        self.directory = directory
        self.memo = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    def get(self, key, build, expect_tasks=None):
        if key in self.memo:
            return self.memo[key]
        path = None
        if self.directory:
            path = os.path.join(self.directory, hashlib.sha256(key.encode()).hexdigest()[:20] + ".ckpt")
            if os.path.exists(path):
                try:
                    ckpt = M.load(path, expect_tasks)
                    self.memo[key] = ckpt
                    return ckpt
                except (M.CheckpointError, M.TaskMismatchError):
                    log.warning("discarding unreadable cached checkpoint %s", path)
        ckpt = build()
        if path:
            tmp = f"{path}.{os.getpid()}.tmp"
            M.save(ckpt, tmp)
            os.replace(tmp, path)
        self.memo[key] = ckpt
        return ckpt


def _stage(method, chain, tasks, datasets, config, seed, store, provenance):
    """Models of the last stage of ``chain``: {task: ckpt} for Single, a ckpt for Multi.

    Appends ``(depth, label, content hash)`` for every trained stage to
    ``provenance``. Identical stages of different methods share one
    store key, so e.g. the Single teachers are trained once per seed.
    """
    depth = len(chain)
    final = depth == len(method.chain)
    kind = chain[-1]
    rnd = chain.count(kind)
    stage_seed = seed if (final or config.teacher_provenance == "fresh") else 0
    stage = replace(method, chain=chain, tasks=None, finetune=False) if final else MethodSpec(chain)
    teachers = None
    if depth > 1:
        prev = _stage(method, chain[:-1], tasks, datasets, config, seed, store, provenance)
        if isinstance(prev, dict):
            teachers = distill.TeacherAssignment.single({t: c.model for t, c in prev.items()})
        else:
            teachers = distill.TeacherAssignment.multi(prev.model, tasks)
    tag = f"{stage.name}|{stage_seed}|{config.digest()}"
    if kind == SINGLE:
        out = {}
        alpha = None if stage.layerwise else 1.0
        for t in tasks:
            s = derive_seed(stage_seed, "stage", kind, rnd, t)
            out[t] = store.get(
                f"{tag}|{t}",
                lambda t=t, s=s: train_single(t, datasets, config, s, _restrict(teachers, [t]), stage.anneal, alpha),
                [t],
            )
            provenance.append((depth, f"{kind[0]}{rnd}/{t}", out[t].content_hash()))
        return out
    s = derive_seed(stage_seed, "stage", kind, rnd)
    ckpt = store.get(
        f"{tag}|{','.join(tasks)}",
        lambda: train_multi(tasks, datasets, config, teachers, stage.anneal, s,
                            alpha=None if stage.layerwise else 1.0,
                            exponent=None if stage.task_sampling else 1.0),
        tasks,
    )
    provenance.append((depth, f"{kind[0]}{rnd}", ckpt.content_hash()))
    return ckpt


def _restrict(teachers, tasks):
    if teachers is None:
        return None
    return distill.TeacherAssignment(teachers.mode, {t: teachers.teacher_for(t) for t in tasks})


# trial results


@dataclass
class TrialResult:
    method: str
    seed: int
    scores: dict
    average: float
    config_digest: str
    status: str = "ok"
    teachers: str = ""
    reason: str = ""
    wall_clock: float = field(default=0.0, compare=False)

    def row(self, tasks):
        cells = [self.method, str(self.seed), self.status]
        cells += [repr(self.scores[t]) if t in self.scores else "NA" for t in tasks]
        cells += [repr(self.average) if self.status == "ok" else "NA", self.config_digest, self.teachers,
                  self.reason.replace("\t", " ").replace("\n", " ")]
        return "\t".join(cells)


def results_header(tasks):
    return "\t".join(["method", "seed", "status", *tasks, "average", "config_digest", "teachers", "reason"])


def read_results(path):
    """Rows of a results file; a trailing partial line (no newline) is ignored."""
    out = []
    if not os.path.exists(path):
        return out
    with open(path, encoding="utf-8") as f:
        text = f.read()
    lines = text.split("\n")
    if not lines or not lines[0]:
        return out
    header = lines[0].split("\t")
    tasks = header[3:-4]
    for line in lines[1:-1]:
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != len(header):
            continue
        scores = {t: float(v) for t, v in zip(tasks, cells[3:-4]) if v != "NA"}
        avg = cells[-4]
        out.append(TrialResult(cells[0], int(cells[1]), scores, float(avg) if avg != "NA" else math.nan,
                               cells[-3], cells[2], cells[-2], cells[-1]))
    return out


def read_timings(path):
    out = {}
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            next(f, None)
            for line in f:
                cells = line.rstrip("\n").split("\t")
                if len(cells) == 3:
                    out[(cells[0], int(cells[1]))] = float(cells[2])
    return out


def run_cell(method, seed, config, store=None):
    """Train and score one (method, seed) cell. Failures are returned, not raised."""
    spec = parse_method(method) if isinstance(method, str) else method
    store = store or ModelStore()
    t0 = time.perf_counter()
    tasks = list(spec.tasks or config.tasks)
    provenance = []
    try:
        unknown = [t for t in tasks if t not in config.tasks]
        if unknown:
            raise KeyError(f"tasks {unknown} not configured")
        datasets = load_datasets(config)
        final = _stage(spec, spec.chain, tasks, datasets, config, seed, store, provenance)
        models = final if isinstance(final, dict) else {t: final for t in tasks}
        if spec.finetune:
            fs = derive_seed(seed, "finetune")
            models = {t: finetune_single(models[t], t, datasets, config, fs) for t in tasks}
        scores = {t: 100.0 * metrics.evaluate(models[t].model, datasets[t]).value for t in tasks}
        res = TrialResult(spec.name, seed, scores, metrics.average_score(scores), config.digest())
    except (TrainingDiverged, FloatingPointError, KeyError, ValueError) as e:
        log.error("cell %s seed %d failed: %s", spec.name, seed, e)
        res = TrialResult(spec.name, seed, {}, math.nan, config.digest(), "failed", reason=f"{type(e).__name__}: {e}")
    res.teachers = ";".join(f"{k}={h}" for d, k, h in provenance if d < len(spec.chain))
    res.wall_clock = time.perf_counter() - t0
    return res


def _cell_job(args):
    method, seed, config, cache_dir = args
    store = _worker_store(cache_dir)
    return run_cell(method, seed, config, store)


_STORES = {}


def _worker_store(cache_dir):
    if cache_dir not in _STORES:
        _STORES[cache_dir] = ModelStore(cache_dir)
    return _STORES[cache_dir]


def run_matrix(config, out_dir, methods=None, seeds=None, parallel=1, resume=True, cache=True):
    """Run every (method, seed) cell not yet in ``out_dir/results.tsv``.

    Rows are appended in canonical method-major order whatever the
    worker count, so the file is identical for any ``parallel``. Wall
    clock times go to ``results.timing.tsv``. Returns all rows.
    """
    methods = [parse_method(m).name for m in (methods or config.methods)]
    seeds = list(config.seeds if seeds is None else seeds)
    if not methods or not seeds:
        raise ValueError("run_matrix needs at least one method and one seed")
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "results.tsv")
    tpath = os.path.join(out_dir, "results.timing.tsv")
    tasks = list(config.tasks)
    if os.path.exists(path) and not resume:
        raise FileExistsError(f"{path} exists; pass resume=True to continue it")
    done = {(r.method, r.seed): r for r in read_results(path)}
    _repair_partial(path)
    if not os.path.exists(path) or os.path.getsize(path) == 0:
        with open(path, "w", encoding="utf-8") as f:
            f.write(results_header(tasks) + "\n")
    if not os.path.exists(tpath):
        with open(tpath, "w", encoding="utf-8") as f:
            f.write("method\tseed\twall_clock_s\n")
    pending = [(m, s) for m in methods for s in seeds if (m, s) not in done]
    cache_dir = os.path.join(out_dir, "cache") if cache else None
    jobs = [(m, s, config, cache_dir) for m, s in pending]
    if parallel > 1 and len(jobs) > 1:
        with multiprocessing.get_context("fork").Pool(parallel) as pool:
            _append_all(pool.imap(_cell_job, jobs, chunksize=1), path, tpath, tasks, done)
    else:
        _append_all(map(_cell_job, jobs), path, tpath, tasks, done)
    return [done[(m, s)] for m in methods for s in seeds]


def _append_all(results, path, tpath, tasks, done):
    for res in results:
        with open(path, "a", encoding="utf-8") as f:
            f.write(res.row(tasks) + "\n")
        with open(tpath, "a", encoding="utf-8") as f:
            f.write(f"{res.method}\t{res.seed}\t{res.wall_clock:.3f}\n")
        done[(res.method, res.seed)] = res
        log.info("%s seed %d: %s avg=%.2f", res.method, res.seed, res.status, res.average)


def _repair_partial(path):
    """Drop a trailing line without newline left by an interrupted writer."""
    if not os.path.exists(path):
        return
    with open(path, "rb") as f:
        data = f.read()
    if data and not data.endswith(b"\n"):
        with open(path, "wb") as f:
            f.write(data[: data.rfind(b"\n") + 1])
