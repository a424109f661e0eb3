"""Training targets and losses: supervised, distilled, and teacher-annealed."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import CLASSIFICATION, REGRESSION, forward

NONE = "none"
SINGLE_TEACHERS = "single_teachers"
MULTI_TEACHER = "multi_teacher"


@dataclass(frozen=True)
class AnnealSchedule:
    total_steps: int

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("schedule needs at least one step")


def lambda_at(step, schedule):
    """Weight on the gold label at ``step``: rises linearly from 0 to 1."""
    n = schedule.total_steps
    if not 0 <= step < n:
        raise ValueError(f"step {step} outside schedule of {n} steps")
    if n == 1:
        return 1.0
    return step / (n - 1)


@dataclass
class TeacherAssignment:
    """Frozen teachers for a student run.

    ``cache`` optionally holds each teacher's predictions on the whole
    train split of a task (row ``i`` for example ``i``); it is filled by
    :meth:`precompute` and used in place of online evaluation.
    """

    mode: str = NONE
    teachers: dict = field(default_factory=dict)
    cache: dict = field(default_factory=dict)

    @classmethod
    def none(cls):
        return cls(NONE)

    @classmethod
    def single(cls, teachers):
        return cls(SINGLE_TEACHERS, dict(teachers))

    @classmethod
    def multi(cls, teacher, task_ids):
        return cls(MULTI_TEACHER, {t: teacher for t in task_ids})

    def teacher_for(self, task_id):
        try:
            return self.teachers[task_id]
        except KeyError:
            raise KeyError(f"no teacher for task {task_id!r} in mode {self.mode}") from None

    def validate(self, student, task_ids=None):
        if self.mode == NONE:
            return
        if self.mode not in (SINGLE_TEACHERS, MULTI_TEACHER):
            raise ValueError(f"unknown teacher mode {self.mode!r}")
        for tid in task_ids or student.task_ids:
            teacher = self.teacher_for(tid)
            s_spec, t_spec = student.spec(tid), teacher.spec(tid)
            if (s_spec.kind, s_spec.out_dim) != (t_spec.kind, t_spec.out_dim):
                raise ValueError(f"teacher head for {tid!r} does not match the student")
            shapes = teacher.param_shapes()
            for name, shape in student.param_shapes().items():
                if not name.startswith("head.") and shapes.get(name) != shape:
                    raise ValueError(f"teacher for {tid!r} has a different trunk shape at {name}")

    def precompute(self, datasets):
        if self.mode == NONE:
            return self
        for tid, teacher in self.teachers.items():
            if tid in datasets:
                self.cache[tid] = forward(teacher, datasets[tid].train_x, tid)
        return self

    def predict(self, task_id, x, index=None):
        if index is not None and task_id in self.cache:
            return self.cache[task_id][index]
        return forward(self.teacher_for(task_id), x, task_id)


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros(labels.shape + (num_classes,))
    out[..., :] = np.arange(num_classes) == labels[..., None]
    return out


def mixed_target(lam, gold, teacher, kind):
    """``lam * gold + (1 - lam) * teacher`` elementwise.

    For classification ``gold`` must already be one-hot.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda {lam} outside [0, 1]")
    gold = np.asarray(gold, dtype=np.float64)
    teacher = np.asarray(teacher, dtype=np.float64)
    if gold.shape != teacher.shape:
        raise ValueError(f"gold shape {gold.shape} != teacher shape {teacher.shape}")
    if kind == CLASSIFICATION and gold.ndim == 0:
        raise ValueError("classification targets must be distributions")
    return lam * gold + (1.0 - lam) * teacher


def example_loss(target, pred, kind):
    """Cross-entropy for classification, squared error for regression (summed over rows)."""
    pred = pred if isinstance(pred, T.Tensor) else T.constant(pred)
    if kind == CLASSIFICATION:
        if pred.data.ndim == 0:
            raise ValueError("classification loss needs a distribution prediction")
        return T.cross_entropy_soft(target, pred)
    if kind == REGRESSION:
        return T.squared_error(target, pred)
    raise ValueError(f"unknown task kind {kind!r}")


def batch_loss(student, teachers, batch, lam, bound=None):
    """Summed loss of ``batch`` against annealed targets.

    ``bound`` maps parameter names to tensors (tape leaves when training);
    without it the student is evaluated as constants. Teachers are always
    evaluated off-tape.
    """
    if len(batch) == 0:
        return T.constant(0.0)
    if bound is None:
        bound = student.bind()
    c = student.trunk(bound, T.constant(batch.x))
    loss = None
    for tid in batch.present():
        rows = batch.rows_of(tid)
        spec = student.spec(tid)
        pred = student.head(bound, T.take_rows(c, rows), tid)
        y = batch.y[rows]
        if spec.kind == CLASSIFICATION:
            gold = one_hot(y, spec.num_classes)
        else:
            gold = student.normalize(tid, y)
        if teachers is None or teachers.mode == NONE:
            target = gold
        else:
            target = mixed_target(lam, gold, teachers.predict(tid, batch.x[rows], batch.index[rows]), spec.kind)
        term = example_loss(target, pred, spec.kind)
        loss = term if loss is None else T.add(loss, term)
    return loss
