"""Command line entry point: ``bam <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as C
from . import distill, harness, metrics, report, synthdata
from . import model as M


def _config(args):
    cfg = C.load(args.config) if getattr(args, "config", None) else C.TrainConfig()
    return cfg


def _scores_line(scores):
    return "  ".join(f"{t}={100 * v:.1f}" for t, v in scores.items())


def cmd_gen_data(args):
    cfg = _config(args)
    seed = cfg.data_seed if args.seed is None else args.seed
    cfg = cfg.replace(data_seed=seed, data_dir="")
    datasets = harness.load_datasets(cfg)
    for ds in datasets.values():
        path = synthdata.write_dataset(ds, args.out)
        print(f"wrote {path} ({len(ds.train_x)} train / {len(ds.dev_x)} dev)")
    return 0


def cmd_train_teacher(args):
    cfg = _config(args)
    datasets = harness.load_datasets(cfg)
    seed = args.seed or 0
    ckpt = harness.train_single(args.task, datasets, cfg, seed)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"teacher-{args.task}-s{seed}.ckpt")
    M.save(ckpt, path)
    print(f"{path}  alpha={ckpt.meta['alpha']}  {_scores_line(harness.dev_scores(ckpt.model, datasets, [args.task]))}")
    return 0


def cmd_train_student(args):
    cfg = _config(args)
    datasets = harness.load_datasets(cfg)
    seed = args.seed or 0
    spec = harness.parse_method(args.method)
    tasks = list(spec.tasks or cfg.tasks)
    os.makedirs(args.out, exist_ok=True)
    if args.teacher:
        if spec.chain[-1] != harness.MULTI or len(spec.chain) != 2:
            raise ValueError("--teacher needs a two-stage method with a multi-task student")
        paths = dict(t.split("=", 1) for t in args.teacher)
        if spec.teacher_mode == distill.MULTI_TEACHER:
            teachers = distill.TeacherAssignment.multi(M.load(next(iter(paths.values()))).model, tasks)
        else:
            teachers = distill.TeacherAssignment.single({t: M.load(p, [t]).model for t, p in paths.items()})
        ckpt = harness.train_multi(tasks, datasets, cfg, teachers, spec.anneal, seed)
    else:
        store = harness.ModelStore(os.path.join(args.out, "cache"))
        out = harness._stage(spec, spec.chain, tasks, datasets, cfg, seed, store, [])
        if isinstance(out, dict):
            for t, c in out.items():
                path = os.path.join(args.out, f"{spec.name}-{t}-s{seed}.ckpt".replace(">", ""))
                M.save(c, path)
                print(f"{path}  {_scores_line(harness.dev_scores(c.model, datasets, [t]))}")
            return 0
        ckpt = out
    path = os.path.join(args.out, f"{spec.name}-s{seed}.ckpt".replace(">", ""))
    M.save(ckpt, path)
    print(f"{path}  {_scores_line(harness.dev_scores(ckpt.model, datasets, tasks))}")
    return 0


def cmd_finetune(args):
    cfg = _config(args)
    datasets = harness.load_datasets(cfg)
    ckpt = M.load(args.checkpoint)
    before = metrics.evaluate(ckpt.model, datasets[args.task]).value
    tuned = harness.finetune_single(ckpt, args.task, datasets, cfg, args.seed or 0)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"finetuned-{args.task}.ckpt")
    M.save(tuned, path)
    after = metrics.evaluate(tuned.model, datasets[args.task]).value
    print(f"{path}  {args.task}: {100 * before:.1f} -> {100 * after:.1f}")
    return 0


def cmd_run_matrix(args):
    cfg = _config(args)
    methods = C.split_top(args.methods) if args.methods else None
    seeds = C.parse_seeds(args.seeds) if args.seeds else None
    if args.seed is not None:
        seeds = (args.seed,)
    path = os.path.join(args.out, "results.tsv")
    if os.path.exists(path) and not args.resume:
        print(f"{path} exists; pass --resume to continue it", file=sys.stderr)
        return 2
    rows = harness.run_matrix(cfg, args.out, methods, seeds, parallel=args.parallel, resume=True)
    failed = [r for r in rows if r.status != "ok"]
    columns, med = report.medians_table(rows, list(cfg.tasks))
    print(report.render_medians(columns, med), end="")
    print(f"{len(rows)} cells, {len(failed)} failed -> {path}")
    return 0 if not failed else 1


def cmd_significance(args):
    results = harness.read_results(args.results)
    rep = report.significance_report(results, args.compare, args.alpha, args.test, args.resamples, args.seed or 0)
    text = rep.to_text()
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "significance.tsv"), "w", encoding="utf-8") as f:
            f.write(rep.to_tsv())
        with open(os.path.join(args.out, "significance.txt"), "w", encoding="utf-8") as f:
            f.write(text)
    return 0


def cmd_report(args):
    results = harness.read_results(args.results)
    out = args.out or os.path.dirname(os.path.abspath(args.results))
    paths, text = report.write_report(results, out)
    print(text, end="")
    if args.compare:
        rep = report.significance_report(results, args.compare, args.alpha, args.test, args.resamples, args.seed or 0)
        with open(os.path.join(out, "significance.tsv"), "w", encoding="utf-8") as f:
            f.write(rep.to_tsv())
        with open(os.path.join(out, "significance.txt"), "w", encoding="utf-8") as f:
            f.write(rep.to_text())
        print()
        print(rep.to_text(), end="")
    for p in paths.values():
        print(f"wrote {p}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="bam", description="Born-again multi-task distillation on synthetic suites.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, out_required=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required)
        sp.set_defaults(fn=fn)
        return sp

    add("gen-data", cmd_gen_data, "write the synthetic suite as dataset files")
    sp = add("train-teacher", cmd_train_teacher, "train a single-task model")
    sp.add_argument("--task", required=True)
    sp = add("train-student", cmd_train_student, "train a model for one method")
    sp.add_argument("--method", default="Single->Multi")
    sp.add_argument("--teacher", action="append", metavar="TASK=PATH")
    sp = add("finetune", cmd_finetune, "single-task fine-tune a multi-task checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--task", required=True)
    sp = add("run-matrix", cmd_run_matrix, "run methods x seeds, appending to OUT/results.tsv")
    sp.add_argument("--methods", help="comma separated method names (default: config 'methods')")
    sp.add_argument("--seeds", help="e.g. 0-19 (default: config 'seeds')")
    sp.add_argument("--parallel", type=int, default=1)
    sp.add_argument("--resume", action="store_true")
    for name, fn, help in (("significance", cmd_significance, "significance table"),
                           ("report", cmd_report, "median tables and figures")):
        sp = add(name, fn, help, out_required=False)
        sp.add_argument("--results", required=True)
        sp.add_argument("--compare", action="append", default=[] if name == "report" else None,
                        required=name == "significance", metavar="METHOD>BASELINE[,BASELINE]")
        sp.add_argument("--test", choices=("bootstrap", "mwu"), default="bootstrap")
        sp.add_argument("--alpha", type=float, default=0.05)
        sp.add_argument("--resamples", type=int, default=10_000)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
