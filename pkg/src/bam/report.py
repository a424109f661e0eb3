"""Median tables, significance tables and figures from a results file."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import stats
from .config import split_top
from .harness import parse_method

AVERAGE = "average"


def trial_grid(results):
    """``{method: {column: [score, ...]}}`` over successful trials, seeds ascending."""
    grid = {}
    for r in sorted((r for r in results if r.status == "ok"), key=lambda r: r.seed):
        cols = grid.setdefault(r.method, {})
        for t, v in r.scores.items():
            cols.setdefault(t, []).append(v)
        cols.setdefault(AVERAGE, []).append(r.average)
    return grid


def _canonical(name):
    # results files may carry labels outside the method grammar
    try:
        return parse_method(name).name
    except ValueError:
        return name.strip()


@dataclass(frozen=True)
class Comparison:
    method: str
    baselines: tuple

    @classmethod
    def parse(cls, text):
        """``"Single->Multi>Single,Multi"``: is the method better than every baseline?"""
        text = text.replace("→", "->")
        # the separator is the one '>' that is not part of a '->' arrow
        cuts = [i for i, ch in enumerate(text) if ch == ">" and text[i - 1 : i] != "-"]
        if len(cuts) != 1:
            raise ValueError(f"comparison {text!r} must look like 'METHOD>BASELINE[,BASELINE...]'")
        cut = cuts[0]
        method = _canonical(text[:cut])
        baselines = tuple(_canonical(b) for b in split_top(text[cut + 1 :]) if b.strip())
        if not baselines:
            raise ValueError(f"comparison {text!r} names no baseline")
        return cls(method, baselines)


@dataclass
class SigRow:
    method: str
    baseline: str
    column: str
    median_a: float
    median_b: float
    p: float
    p_adj: float = 1.0
    reject: bool = False

    @property
    def improved(self):
        return self.median_a > self.median_b

    @property
    def stars(self):
        return stats.stars(self.p_adj) if self.improved else ""


@dataclass
class SignificanceReport:
    columns: list
    comparisons: list
    rows: list
    test: str
    alpha: float

    def cell(self, comparison, column):
        rows = [r for r in self.rows if r.method == comparison.method and r.column == column
                and r.baseline in comparison.baselines]
        if not rows:
            return None, ""
        levels = [len(r.stars) for r in rows]
        return rows[0].median_a, "*" * min(levels)

    def summary(self):
        out = []
        for c in self.comparisons:
            vals = [self.cell(c, col) for col in self.columns]
            out.append((c, vals))
        return out

    def to_tsv(self):
        lines = ["\t".join(["method", "baseline", "column", "median", "baseline_median", "p", "p_holm", "reject", "stars"])]
        for r in self.rows:
            lines.append("\t".join([r.method, r.baseline, r.column, f"{r.median_a:.1f}", f"{r.median_b:.1f}",
                                    f"{r.p:.6g}", f"{r.p_adj:.6g}", str(r.reject).lower(), r.stars]))
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = ["method", "vs"] + self.columns
        body = []
        for c, vals in self.summary():
            body.append([c.method, ",".join(c.baselines)]
                        + ["" if v is None else f"{v:.1f}{s}" for v, s in vals])
        title = (f"{'bootstrap' if self.test == 'bootstrap' else 'Mann-Whitney U'} tests, Holm-corrected "
                 f"over {len(self.rows)} comparisons; * p<.05 ** p<.01 *** p<.001")
        return title + "\n" + align([header] + body)


def align(rows):
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(str(c).ljust(w) if i < 2 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def significance_report(results, comparisons, alpha=0.05, test="bootstrap", resamples=10_000, seed=0,
                        columns=None):
    """Test each comparison's method against each baseline on every column.

    ``test`` is ``"bootstrap"`` (one-sided, difference of medians) or
    ``"mwu"`` (two-sided Mann-Whitney U; stars also need a higher median).
    All tests of the report form one Holm family.
    """
    if test not in ("bootstrap", "mwu"):
        raise ValueError(f"unknown test {test!r}")
    grid = trial_grid(results)
    comps = [c if isinstance(c, Comparison) else Comparison.parse(c) for c in comparisons]
    for c in comps:
        for m in (c.method, *c.baselines):
            if m not in grid:
                raise ValueError(f"unknown method {m!r} in comparison; results have {sorted(grid)}")
    if columns is None:
        columns = []
        for c in comps:
            for m in (c.method, *c.baselines):
                for col in grid[m]:
                    if col not in columns and col != AVERAGE:
                        columns.append(col)
        columns.append(AVERAGE)
    rows = []
    for c in comps:
        for b in c.baselines:
            for col in columns:
                xa, xb = grid[c.method].get(col), grid[b].get(col)
                if not xa or not xb:
                    continue
                if len(xa) < stats.MIN_TRIALS or len(xb) < stats.MIN_TRIALS:
                    raise ValueError(f"{c.method} vs {b} on {col}: need >= {stats.MIN_TRIALS} trials per method")
                if test == "bootstrap":
                    p = stats.bootstrap_test(xa, xb, resamples, seed)
                else:
                    p = stats.mann_whitney_u(xa, xb)[1]
                rows.append(SigRow(c.method, b, col, stats.median_of_trials(xa), stats.median_of_trials(xb), p))
    if rows:
        reject, adj = stats.holm_bonferroni([r.p for r in rows], alpha)
        for r, rej, pa in zip(rows, reject, adj):
            r.reject, r.p_adj = rej, pa
    return SignificanceReport(columns, comps, rows, test, alpha)


# medians and figures


def medians_table(results, tasks=None):
    grid = trial_grid(results)
    failed = {}
    for r in results:
        if r.status != "ok":
            failed[r.method] = failed.get(r.method, 0) + 1
    methods = list(dict.fromkeys(r.method for r in results))
    if tasks is None:
        tasks = list(dict.fromkeys(t for r in results for t in r.scores))
    columns = list(tasks) + [AVERAGE]
    rows = []
    for m in methods:
        cols = grid.get(m, {})
        meds = [stats.median_of_trials(cols[c]) if cols.get(c) else None for c in columns]
        rows.append((m, len(cols.get(AVERAGE, [])), failed.get(m, 0), meds))
    return columns, rows


def render_medians(columns, rows, sep=None):
    header = ["method", "trials", "failed"] + columns
    body = [[m, str(n), str(f)] + ["NA" if v is None else f"{v:.1f}" for v in meds] for m, n, f, meds in rows]
    if sep:
        return "\n".join(sep.join(r) for r in [header] + body) + "\n"
    return align([header] + body)


def best_trials(results):
    """Post-hoc view: the single trial with the highest average per method."""
    best = {}
    for r in results:
        if r.status == "ok" and (r.method not in best or r.average > best[r.method].average):
            best[r.method] = r
    return best


def plot_trials(results, path, tasks=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    grid = trial_grid(results)
    methods = [m for m in dict.fromkeys(r.method for r in results) if m in grid]
    if tasks is None:
        tasks = list(dict.fromkeys(t for r in results for t in r.scores))
    columns = list(tasks) + [AVERAGE]
    fig, axes = plt.subplots(1, len(columns), figsize=(3.2 * len(columns), 3.6), squeeze=False)
    rng = np.random.default_rng(0)
    for ax, col in zip(axes[0], columns):
        data = [grid[m].get(col, []) for m in methods]
        pos = [i for i, d in enumerate(data) if d]
        if pos:
            ax.boxplot([data[i] for i in pos], positions=pos, widths=0.6, showfliers=False)
            for i in pos:
                ax.plot(i + rng.uniform(-0.15, 0.15, len(data[i])), data[i], ".", alpha=0.5, color="C0", ms=4)
        ax.set_title(col)
        ax.set_xticks(range(len(methods)))
        ax.set_xticklabels(methods, rotation=60, ha="right", fontsize=7)
        ax.grid(axis="y", alpha=0.3)
    axes[0][0].set_ylabel("dev score (0-100)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_medians(columns, rows, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 + 0.9 * len(columns) * max(1, len(rows)) / 3, 3.6))
    width = 0.8 / max(1, len(rows))
    for k, (m, _, _, meds) in enumerate(rows):
        xs = [i + k * width for i, v in enumerate(meds) if v is not None]
        ys = [v for v in meds if v is not None]
        ax.bar(xs, ys, width, label=m)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(columns))])
    ax.set_xticklabels(columns)
    ax.set_ylabel("median dev score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_report(results, out_dir, tasks=None):
    """Median tables (TSV + text), best-trial view and figures. Returns written paths."""
    os.makedirs(out_dir, exist_ok=True)
    columns, rows = medians_table(results, tasks)
    paths = {}
    paths["medians.tsv"] = os.path.join(out_dir, "medians.tsv")
    with open(paths["medians.tsv"], "w", encoding="utf-8") as f:
        f.write(render_medians(columns, rows, sep="\t"))
    text = render_medians(columns, rows)
    best = best_trials(results)
    bl = [["method", "seed"] + columns]
    for m, r in best.items():
        bl.append([m, str(r.seed)] + [f"{r.scores[c]:.1f}" if c in r.scores else "NA" for c in columns[:-1]]
                  + [f"{r.average:.1f}"])
    text += "\nbest single trial by average dev score (post-hoc selection)\n" + align(bl)
    paths["medians.txt"] = os.path.join(out_dir, "medians.txt")
    with open(paths["medians.txt"], "w", encoding="utf-8") as f:
        f.write(text)
    if any(r.status == "ok" for r in results):
        paths["trials.png"] = plot_trials(results, os.path.join(out_dir, "trials.png"), tasks)
        paths["medians.png"] = plot_medians(columns, rows, os.path.join(out_dir, "medians.png"))
    return paths, text
