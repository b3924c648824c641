"""Command-line entry point.

Exit status: 0 on success, 1 on a domain error (missing or malformed input,
training failure), 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

USAGE_EXIT, DOMAIN_EXIT = 2, 1
COMMANDS = ("gen-data", "train-teacher", "distill", "complete", "eval", "ablate", "bench", "export-plots")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--steps", type=int, help="denoising steps")
    p.add_argument("--out", help="output file or directory")
    p.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="config override, e.g. distill.iterations=100 (repeatable)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="pcdistill", description="Few-step point cloud scene completion.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset and manifest")
    sub.add_parser("train-teacher", parents=[common], help="train the multi-step teacher")

    p = sub.add_parser("distill", parents=[common], help="distill a teacher checkpoint into a student")
    p.add_argument("--teacher", required=True, help="teacher checkpoint (.npz)")

    p = sub.add_parser("complete", parents=[common], help="complete one scan")
    p.add_argument("--model", required=True, help="model checkpoint (.npz)")
    p.add_argument("--scan", required=True, help="scan point file")
    p.add_argument("--gt", help="ground-truth point file; adds a metric report")
    p.add_argument("--mode", choices=("auto", "chain", "renoise"), default="auto",
                   help="sampler; auto uses chain for teachers and renoise otherwise")

    p = sub.add_parser("eval", parents=[common], help="metrics between a completion and ground truth")
    p.add_argument("pred", help="completion point file")
    p.add_argument("gt", help="ground-truth point file")

    p = sub.add_parser("ablate", parents=[common], help="run one ablation table")
    p.add_argument("name", help="ablation name")

    sub.add_parser("bench", parents=[common], help="full pipeline and benchmark table")

    p = sub.add_parser("export-plots", parents=[common], help="CSV/PGM data behind the figures")
    p.add_argument("--run", help="pipeline output directory (default: config output_dir)")
    p.add_argument("--scene", type=int, default=0, help="held-out scene index")
    return parser


class UsageError(Exception):
    pass


def _config(args):
    from .trainer import load_config

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    return load_config(args.config, overrides)


def _out_dir(args, cfg) -> Path:
    return Path(args.out) if args.out else Path(cfg.output_dir)


def cmd_gen_data(args) -> int:
    from .synth import generate_dataset

    cfg = _config(args)
    out = _out_dir(args, cfg)
    m = generate_dataset(out, cfg.data.n_train, cfg.data.n_test, cfg.data.seed)
    print(f"wrote {len(m.records)} scenes and {out / 'manifest.json'}")
    return 0


def cmd_train_teacher(args) -> int:
    from .net import save_checkpoint
    from .trainer import get_teacher, load_data, schedule_of

    cfg = _config(args)
    train, _ = load_data(cfg)
    model = get_teacher(cfg, train, schedule_of(cfg))
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "teacher.npz"
    save_checkpoint(model, out)
    print(f"teacher checkpoint: {out}")
    return 0


def cmd_distill(args) -> int:
    from .distill import distill
    from .net import load_checkpoint, save_checkpoint
    from .trainer import load_data, schedule_of

    cfg = _config(args)
    teacher = load_checkpoint(_existing(args.teacher))
    train, _ = load_data(cfg)
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "student.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    state = distill(teacher, train, schedule_of(cfg), cfg.distill, log_path=out.with_suffix(".jsonl"))
    save_checkpoint(state.eta, out)
    print(f"student checkpoint: {out} ({state.iteration} iterations)")
    return 0


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def cmd_complete(args) -> int:
    from .geometry import Role, Scene
    from .metrics import evaluate
    from .net import load_checkpoint
    from .synth import read_pointcloud, write_pointcloud
    from .trainer import schedule_of, student_sampler, teacher_sampler
    from .diffusion import sample_multistep

    scan = read_pointcloud(_existing(args.scan), Role.SCAN).points
    gt = read_pointcloud(_existing(args.gt)).points if args.gt else None
    model = load_checkpoint(_existing(args.model))
    cfg = _config(args)
    mode = args.mode if args.mode != "auto" else ("chain" if model.role == "teacher" else "renoise")
    steps = args.steps or (cfg.eval.teacher_steps[0] if mode == "chain" else cfg.eval.student_steps[0])
    sampler = (teacher_sampler if mode == "chain" else student_sampler)(cfg, steps)
    comp = sample_multistep(model, scan, schedule_of(cfg), sampler, seed=cfg.seed, k_dup=cfg.eval.k_dup)
    out = Path(args.out) if args.out else Path(args.scan).with_suffix(".completed.xyz")
    write_pointcloud(Scene(comp, Role.COMPLETION), out)
    print(f"completion: {out} ({len(comp)} points, {steps} steps, {mode})")
    if gt is not None:
        report = evaluate(comp, gt, cfg.metrics)
        rep_path = out.with_suffix(".report.json")
        rep_path.write_text(report.to_json() + "\n")
        print(report.to_json())
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .synth import read_pointcloud

    pred = read_pointcloud(_existing(args.pred)).points
    gt = read_pointcloud(_existing(args.gt)).points
    cfg = _config(args)
    report = evaluate(pred, gt, cfg.metrics)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    from .trainer import ABLATIONS, format_table, run_ablation

    if args.name not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.name!r}; choose from {', '.join(ABLATIONS)}")
    cfg = _config(args)
    if args.out:
        cfg = _with_out(cfg, args.out)
    rows = run_ablation(cfg, args.name, steps=args.steps or cfg.eval.student_steps[0])
    print(format_table(rows))
    return 0


def _with_out(cfg, out):
    from dataclasses import replace

    return replace(cfg, output_dir=str(Path(out).resolve()))


def cmd_bench(args) -> int:
    from .trainer import format_table, read_table, run_pipeline

    cfg = _config(args)
    if args.out:
        cfg = _with_out(cfg, args.out)
    out = run_pipeline(cfg)
    print(format_table(read_table(out / "benchmark.csv")))
    print(f"artifacts: {out}")
    return 0


def cmd_export_plots(args) -> int:
    from .plots import export_plots

    cfg = _config(args)
    run = Path(args.run) if args.run else Path(cfg.output_dir)
    out = Path(args.out) if args.out else run / "plots"
    for p in export_plots(cfg, run, out, scene=args.scene, steps=args.steps):
        print(p)
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "complete": cmd_complete,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the synopsis
        return USAGE_EXIT if exc.code else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        from .trainer import set_threads

        set_threads(args.threads)
    try:
        return HANDLERS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"pcdistill: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"pcdistill {args.command}: error: {exc}", file=sys.stderr)
        return DOMAIN_EXIT


if __name__ == "__main__":
    sys.exit(main())
