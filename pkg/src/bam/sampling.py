"""Size-weighted task sampling that mixes tasks inside each minibatch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_EXPONENT = 0.75


def rng_stream(seed, *keys):
    """Counter-based generator for one named stream of one trial."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(_key, keys)])))


def _key(k):
    if isinstance(k, int):
        return k
    return int.from_bytes(str(k).encode("utf-8")[:8].ljust(8, b"\0"), "little") ^ len(str(k))


def task_weights(sizes, exponent=DEFAULT_EXPONENT):
    """Sampling probability of each task, proportional to ``size ** exponent``."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("task_weights needs at least one task")
    if np.any(sizes < 1):
        raise ValueError("every task needs at least one training example")
    if exponent < 0:
        raise ValueError("exponent must be nonnegative")
    # scale by the largest size first so weights are exactly scale-invariant
    raw = (sizes / sizes.max()) ** exponent
    return raw / raw.sum()


def total_steps(sizes, batch_size, epochs):
    return math.ceil(epochs * sum(sizes) / batch_size)


@dataclass
class Batch:
    """A minibatch of ``(task, example)`` slots, possibly mixing tasks."""

    task_ids: list
    slot_task: np.ndarray
    index: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.index)

    def __iter__(self):
        for t, i in zip(self.slot_task, self.index):
            yield self.task_ids[t], int(i)

    def rows_of(self, task_id):
        return np.flatnonzero(self.slot_task == self.task_ids.index(task_id))

    def present(self):
        """Tasks occurring in the batch, in registration order."""
        seen = set(self.slot_task.tolist())
        return [t for k, t in enumerate(self.task_ids) if k in seen]


class TaskSampler:
    def __init__(self, task_ids, sizes, exponent=DEFAULT_EXPONENT, seed=0, stream="sampler"):
        self.task_ids = list(task_ids)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.exponent = exponent
        self.weights = task_weights(self.sizes, exponent)
        self.rng = rng_stream(seed, stream)

    def draw_tasks(self, n):
        return self.rng.choice(len(self.task_ids), size=n, p=self.weights)

    def draw(self, n):
        tasks = self.draw_tasks(n)
        index = self.rng.integers(0, self.sizes[tasks])
        return tasks, index


def sample_batch(sampler, datasets, batch_size):
    """Draw ``batch_size`` i.i.d. slots: a task by weight, then a uniform train example."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    tasks, index = sampler.draw(batch_size)
    width = datasets[sampler.task_ids[0]].width
    x = np.empty((batch_size, width))
    y = np.empty(batch_size)
    for k, tid in enumerate(sampler.task_ids):
        rows = tasks == k
        if rows.any():
            ds = datasets[tid]
            x[rows] = ds.train_x[index[rows]]
            y[rows] = ds.train_y[index[rows]]
    return Batch(sampler.task_ids, tasks, index, x, y)
