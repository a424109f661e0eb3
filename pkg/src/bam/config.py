"""Run configuration and the flat ``key = value`` config file format."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

DEFAULT_TASKS = ("BIG-A", "SMALL-A", "MED-B", "REG-C")

# keys that describe what to run rather than how to train; excluded from the digest
MATRIX_KEYS = ("methods", "seeds")


@dataclass(frozen=True)
class TrainConfig:
    tasks: tuple = DEFAULT_TASKS
    data_seed: int = 0
    data_dir: str = ""
    train_sizes: tuple = ()
    dev_size: int = 0
    input_width: int = 32
    hidden: tuple = (64, 64)
    # multi-task students
    base_lr: float = 1e-3
    alpha: float = 0.9
    batch_size: int = 32
    epochs: float = 6.0
    exponent: float = 0.75
    # single-task models (teachers, Single, Single->Single)
    teacher_lr: float = 1e-3
    teacher_alphas: tuple = (1.0, 0.9)
    teacher_batch_size: int = 32
    teacher_epochs: float = 3.0
    teacher_provenance: str = "fresh"
    # single-task fine-tuning
    finetune_lr_factor: float = 0.1
    finetune_epochs: float = 3.0
    methods: tuple = ("Single", "Multi", "Single->Multi")
    seeds: tuple = tuple(range(20))

    def __post_init__(self):
        if self.teacher_provenance not in ("fresh", "shared"):
            raise ValueError("teacher_provenance must be 'fresh' or 'shared'")
        if not self.tasks:
            raise ValueError("config needs at least one task")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def digest(self):
        text = dumps(self, include_matrix=False)
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def train_size_overrides(self):
        return dict(_split_pair(p) for p in self.train_sizes)


def _split_pair(p):
    k, v = p.split(":")
    return k.strip(), int(v)


def split_top(text, sep=","):
    """Split on ``sep`` outside of ``[...]`` and ``{...}`` groups."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    parts.append("".join(cur))
    return parts


def parse_seeds(text):
    """``"0-4,9"`` -> ``(0, 1, 2, 3, 4, 9)``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1) if not part.startswith("-") else part[1:].split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return tuple(out)


def _convert(f, raw):
    default = f.default
    if f.name == "seeds":
        return parse_seeds(raw)
    if isinstance(default, tuple):
        items = [s.strip() for s in split_top(raw) if s.strip()]
        if f.name in ("hidden",):
            return tuple(int(s) for s in items)
        if f.name == "teacher_alphas":
            return tuple(float(s) for s in items)
        return tuple(items)
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def loads(text, base=None):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ValueError(f"config line {n}: unknown key {key!r}")
        values[key] = _convert(fields[key], raw)
    return dataclasses.replace(base or TrainConfig(), **values)


def load(path, base=None):
    with open(path, encoding="utf-8") as f:
        return loads(f.read(), base)


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps(config, include_matrix=True):
    lines = []
    for f in dataclasses.fields(config):
        if not include_matrix and f.name in MATRIX_KEYS:
            continue
        lines.append(f"{f.name} = {_fmt(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"
