"""Plot data export: CSV series and PGM grids, no rendering."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .diffusion import sample_multistep
from .distill import ground_truth_keypoints
from .geometry import correspond_keypoints, distance_matrix, nearest_index
from .net import load_checkpoint
from .trainer import load_data, read_table, schedule_of, student_sampler, teacher_sampler

HIST_BINS = np.linspace(0.0, 2.0, 41)


def write_pgm(grid: np.ndarray, path, vmax: float | None = None):
    """Plain (P2) greyscale image, 0 = black at zero, 255 at ``vmax``."""
    g = np.asarray(grid, dtype=np.float64)
    vmax = float(g.max()) if vmax is None else float(vmax)
    img = np.zeros(g.shape, dtype=int) if vmax <= 0 else np.clip(np.round(g / vmax * 255), 0, 255).astype(int)
    rows = "\n".join(" ".join(map(str, r)) for r in img)
    Path(path).write_text(f"P2\n{g.shape[1]} {g.shape[0]}\n255\n{rows}\n")


def _csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def export_plots(cfg, run_dir, out_dir, scene: int = 0, steps: int | None = None) -> list[Path]:
    """CD-vs-time series, nearest-neighbour distance histograms and keypoint
    distance-matrix difference grids for one held-out scene."""
    run, out = Path(run_dir), Path(out_dir)
    for name in ("benchmark.csv", "teacher.npz", "student.npz"):
        if not (run / name).exists():
            raise FileNotFoundError(f"missing pipeline artifact: {run / name}")
    out.mkdir(parents=True, exist_ok=True)
    written = []

    p = out / "cd_vs_time.csv"
    _csv(p, ("row", "time", "cd"), [(r["row"], r["time"], r["cd"]) for r in read_table(run / "benchmark.csv")])
    written.append(p)

    _, test = load_data(cfg)
    if not 0 <= scene < len(test):
        raise ValueError(f"scene index {scene} outside held-out split of {len(test)}")
    scan, gt = test[scene]
    sched = schedule_of(cfg)
    steps = steps or cfg.eval.student_steps[0]
    teacher, student = load_checkpoint(run / "teacher.npz"), load_checkpoint(run / "student.npz")
    comps = {
        f"teacher@{cfg.eval.teacher_steps[0]}": sample_multistep(
            teacher, scan, sched, teacher_sampler(cfg, cfg.eval.teacher_steps[0]), seed=cfg.seed, k_dup=cfg.eval.k_dup),
        f"student@{steps}": sample_multistep(
            student, scan, sched, student_sampler(cfg, steps), seed=cfg.seed, k_dup=cfg.eval.k_dup),
    }

    hist_rows = []
    for name, comp in comps.items():
        d_cg = np.sqrt(nearest_index(comp, gt)[1])
        d_gc = np.sqrt(nearest_index(gt, comp)[1])
        h1, _ = np.histogram(np.clip(d_cg, 0, HIST_BINS[-1]), HIST_BINS)
        h2, _ = np.histogram(np.clip(d_gc, 0, HIST_BINS[-1]), HIST_BINS)
        for lo, hi, a, b in zip(HIST_BINS[:-1], HIST_BINS[1:], h1, h2):
            hist_rows.append((name, f"{lo:.2f}", f"{hi:.2f}", int(a), int(b)))
    p = out / "nn_distance_hist.csv"
    _csv(p, ("method", "bin_lo", "bin_hi", "completion_to_gt", "gt_to_completion"), hist_rows)
    written.append(p)

    keys = ground_truth_keypoints(gt, cfg.distill, cfg.seed)
    d_gt = distance_matrix(gt[keys.indices])
    diffs = {}
    for name, comp in comps.items():
        corr = correspond_keypoints(gt, keys, comp)
        diffs[name] = np.abs(distance_matrix(comp[corr.indices]) - d_gt)
    vmax = max(float(d.max()) for d in diffs.values())
    summary = []
    for name, d in diffs.items():
        stem = name.replace("@", "_at_")
        p = out / f"keypoint_diff_{stem}.pgm"
        write_pgm(d, p, vmax)
        written.append(p)
        summary.append((name, len(d), f"{float(np.sum(d * d)):.6f}", f"{float(d.max()):.6f}"))
    p = out / "keypoint_diff_summary.csv"
    _csv(p, ("method", "n_keypoints", "frobenius_sq", "max_abs"), summary)
    written.append(p)
    return written
