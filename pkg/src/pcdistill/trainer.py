"""Experiment orchestration: config loading, the teacher -> distill -> evaluate
pipeline, benchmark tables and ablations."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .diffusion import SamplerConfig, sample_multistep, train_teacher
from .distill import DistillConfig, distill
from .metrics import GridConfig, MetricConfig, MetricReport, evaluate
from .net import DenoiserModel, NetConfig, load_checkpoint, save_checkpoint
from .schedule import NoiseSchedule, build_schedule
from .synth import DatasetManifest, make_dataset

log = logging.getLogger(__name__)

ENV_OUT = "PCDISTILL_OUT"
ENV_THREADS = "PCDISTILL_THREADS"
THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
TABLE_COLUMNS = ("row", "cd", "jsd", "emd", "time", "config_hash")
ABLATIONS = ("no-structural", "no-scene", "no-point", "weights", "keypoint-count", "selection-method")


class PipelineError(RuntimeError):
    """A stage failed; artifacts written so far are kept in the output directory."""


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None  # None: generate the benchmark in memory
    n_train: int = 40
    n_test: int = 20
    seed: int = 0


@dataclass(frozen=True)
class TeacherConfig:
    epochs: int = 50
    lr: float = 1e-3
    optimizer: str = "adam"


@dataclass(frozen=True)
class EvalConfig:
    teacher_steps: tuple[int, ...] = (50, 8)
    student_steps: tuple[int, ...] = (8, 4, 2, 1)
    inversion: str = "offset"
    teacher_stochastic: bool = True
    k_dup: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    output_dir: str = "runs/default"
    seed: int = 0
    threads: int | None = None
    reuse: bool = True  # reuse checkpoints already produced for an identical config

    def __post_init__(self):
        if not self.eval.teacher_steps or not self.eval.student_steps:
            raise ValueError("step lists must be non-empty")
        if self.net.T != self.schedule.T:
            raise ValueError(f"net T={self.net.T} does not match schedule T={self.schedule.T}")
        if self.data.manifest is not None and not Path(self.data.manifest).exists():
            raise FileNotFoundError(f"dataset manifest not found: {self.data.manifest}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Hash of every field that can change results (not paths or thread counts)."""
        d = self.to_dict()
        for k in ("output_dir", "threads", "reuse"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=seed, distill=replace(self.distill, seed=seed))


# config loading -------------------------------------------------------------

_SECTIONS = {
    "schedule": ScheduleConfig,
    "net": NetConfig,
    "data": DataConfig,
    "teacher": TeacherConfig,
    "distill": DistillConfig,
    "eval": EvalConfig,
}


def _build(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = {}
    for k, v in d.items():
        # yaml gives lists; frozen configs store tuples
        kw[k] = tuple(v) if isinstance(v, list) else v
    return cls(**kw)


def _metrics_from(d: dict) -> MetricConfig:
    d = dict(d)
    grid = GridConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("grid", {}).items()})
    if "iou_resolutions" in d:
        d["iou_resolutions"] = tuple(float(r) for r in d["iou_resolutions"])
    return MetricConfig(grid=grid, **d)


def config_from_dict(d: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    """Nested mapping -> ExperimentConfig; relative paths resolve against ``base_dir``."""
    d = dict(d or {})
    base = Path(base_dir)
    kw = {}
    for name, cls in _SECTIONS.items():
        if name in d:
            kw[name] = _build(cls, d.pop(name) or {})
    if "data" in kw and kw["data"].manifest is not None:
        kw["data"] = replace(kw["data"], manifest=str((base / kw["data"].manifest).resolve()))
    if "metrics" in d:
        kw["metrics"] = _metrics_from(d.pop("metrics") or {})
    if "output_dir" in d:
        kw["output_dir"] = str((base / d.pop("output_dir")).resolve())
    for k in ("seed", "threads", "reuse"):
        if k in d:
            kw[k] = d.pop(k)
    if d:
        raise ValueError(f"unknown config keys: {sorted(d)}")
    if "schedule" in kw and "net" not in kw:
        kw["net"] = NetConfig(T=kw["schedule"].T)
    cfg = ExperimentConfig(**kw)
    return replace(cfg, distill=replace(cfg.distill, seed=cfg.seed))


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    d = json.loads(json.dumps(d or {}))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a non-mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return d


def load_config(path=None, overrides: list[str] = (), env=None) -> ExperimentConfig:
    """Read a YAML config, apply overrides, then environment overrides for output and threads."""
    env = os.environ if env is None else env
    d, base = {}, Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        d = yaml.safe_load(path.read_text()) or {}
        base = path.parent
    d = apply_overrides(d, list(overrides))
    cfg = config_from_dict(d, base)
    if env.get(ENV_OUT):
        cfg = replace(cfg, output_dir=str(Path(env[ENV_OUT]).resolve()))
    if env.get(ENV_THREADS):
        cfg = replace(cfg, threads=int(env[ENV_THREADS]))
    return cfg


def set_threads(n: int | None):
    """Cap BLAS/OpenMP threads for child libraries that read these variables at load time."""
    if n is not None:
        for var in THREAD_VARS:
            os.environ[var] = str(int(n))


# pipeline -------------------------------------------------------------------

@dataclass
class BenchmarkRow:
    row: str
    cd: float
    jsd: float
    emd: float
    time: float
    config_hash: str
    reports: list[MetricReport] = field(default_factory=list, repr=False)

    def as_record(self) -> dict:
        return {c: getattr(self, c) for c in TABLE_COLUMNS}


def load_data(cfg: ExperimentConfig):
    if cfg.data.manifest is not None:
        m = DatasetManifest.read(cfg.data.manifest)
        return m.load("train"), m.load("held-out")
    return make_dataset(cfg.data.n_train, cfg.data.n_test, cfg.data.seed)


def schedule_of(cfg: ExperimentConfig) -> NoiseSchedule:
    return build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _teacher_key(cfg: ExperimentConfig) -> str:
    d = {k: asdict(getattr(cfg, k)) for k in ("schedule", "net", "data", "teacher")}
    d["seed"] = cfg.seed
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def get_teacher(cfg: ExperimentConfig, train, sched: NoiseSchedule) -> DenoiserModel:
    path = Path(cfg.output_dir) / "cache" / f"teacher_{_teacher_key(cfg)}.npz"
    if cfg.reuse and path.exists():
        return load_checkpoint(path)
    t0 = time.perf_counter()
    model = train_teacher(train, cfg.teacher.epochs, sched, cfg.net, seed=cfg.seed,
                          lr=cfg.teacher.lr, optimizer=cfg.teacher.optimizer)
    log.info("teacher trained in %.1fs", time.perf_counter() - t0)
    save_checkpoint(model, path)
    return model


def get_student(cfg: ExperimentConfig, teacher: DenoiserModel, train, sched: NoiseSchedule,
                log_path=None) -> DenoiserModel:
    path = Path(cfg.output_dir) / "cache" / f"student_{_teacher_key(cfg)}_{cfg.config_hash()}.npz"
    if cfg.reuse and path.exists():
        return load_checkpoint(path)
    t0 = time.perf_counter()
    state = distill(teacher, train, sched, cfg.distill, log_path=log_path)
    log.info("distilled %d iterations in %.1fs", state.iteration, time.perf_counter() - t0)
    save_checkpoint(state.eta, path)
    return state.eta


def evaluate_model(model: DenoiserModel, test, sched: NoiseSchedule, sampler: SamplerConfig,
                   cfg: ExperimentConfig, name: str) -> BenchmarkRow:
    """Complete every held-out scan; CD/JSD/EMD are means over scenes, time is the median."""
    reports = []
    for i, (scan, gt) in enumerate(test):
        t0 = time.perf_counter()
        comp = sample_multistep(model, scan, sched, sampler, seed=cfg.seed * 100_003 + i, k_dup=cfg.eval.k_dup)
        dt = time.perf_counter() - t0
        reports.append(evaluate(comp, gt, cfg.metrics, wall_time=dt))
    return BenchmarkRow(
        row=name,
        cd=float(np.mean([r.cd for r in reports])),
        jsd=float(np.mean([r.jsd for r in reports])),
        emd=float(np.mean([r.emd for r in reports])),
        time=float(np.median([r.wall_time for r in reports])),
        config_hash=cfg.config_hash(),
        reports=reports,
    )


def teacher_sampler(cfg: ExperimentConfig, steps: int) -> SamplerConfig:
    return SamplerConfig.even(cfg.schedule.T, steps, mode="chain", inversion=cfg.eval.inversion,
                              stochastic=cfg.eval.teacher_stochastic)


def student_sampler(cfg: ExperimentConfig, steps: int) -> SamplerConfig:
    return SamplerConfig.even(cfg.schedule.T, steps, mode="renoise", inversion=cfg.eval.inversion)


def write_table(rows: list[BenchmarkRow], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow([r.row, f"{r.cd:.6f}", f"{r.jsd:.6f}", f"{r.emd:.6f}", f"{r.time:.4f}", r.config_hash])


def read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        out = []
        for rec in csv.DictReader(fh):
            out.append({k: (v if k in ("row", "config_hash") else float(v)) for k, v in rec.items()})
        return out


def format_table(rows) -> str:
    recs = [r.as_record() if isinstance(r, BenchmarkRow) else r for r in rows]
    lines = [f"{'row':<28}{'CD':>10}{'JSD':>10}{'EMD':>10}{'time(s)':>10}  hash"]
    for r in recs:
        lines.append(f"{r['row']:<28}{r['cd']:>10.4f}{r['jsd']:>10.4f}{r['emd']:>10.4f}{r['time']:>10.4f}  {r['config_hash']}")
    return "\n".join(lines)


def _write_reports(rows: list[BenchmarkRow], path):
    body = {r.row: [rep.to_dict() for rep in r.reports] for r in rows}
    Path(path).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def run_pipeline(cfg: ExperimentConfig) -> Path:
    """Teacher training, distillation and the step-count benchmark; returns the artifact directory.

    Writes teacher.npz, student.npz, distill_log.jsonl, reports.json (per-scene
    MetricReports), benchmark.csv and config.json. On failure the files written
    so far stay in place and a FAILED note records the error.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True, default=list) + "\n")
    stage = "data"
    try:
        train, test = load_data(cfg)
        sched = schedule_of(cfg)
        stage = "teacher"
        teacher = get_teacher(cfg, train, sched)
        save_checkpoint(teacher, out / "teacher.npz")
        stage = "distill"
        student = get_student(cfg, teacher, train, sched, log_path=out / "distill_log.jsonl")
        save_checkpoint(student, out / "student.npz")
        stage = "evaluate"
        rows = [evaluate_model(teacher, test, sched, teacher_sampler(cfg, s), cfg, f"teacher@{s}")
                for s in cfg.eval.teacher_steps]
        rows += [evaluate_model(student, test, sched, student_sampler(cfg, s), cfg, f"student@{s}")
                 for s in cfg.eval.student_steps]
        write_table(rows, out / "benchmark.csv")
        _write_reports(rows, out / "reports.json")
    except Exception as exc:
        (out / "FAILED").write_text(f"stage {stage}: {type(exc).__name__}: {exc}\n")
        raise PipelineError(f"pipeline failed at stage {stage}: {exc}") from exc
    (out / "FAILED").unlink(missing_ok=True)
    log.info("benchmark\n%s", format_table(rows))
    return out


def ablation_variants(cfg: ExperimentConfig, name: str) -> list[tuple[str, ExperimentConfig]]:
    """(label, config) pairs for an ablation; the first entry is always the unchanged default."""
    d = cfg.distill

    def v(label, **kw):
        return (label, replace(cfg, distill=replace(d, **kw)))

    base = ("default", cfg)
    if name == "no-structural":
        return [base, v("no-structural", lambda_scene=0.0, lambda_point=0.0)]
    if name == "no-scene":
        return [base, v("no-scene", lambda_scene=0.0)]
    if name == "no-point":
        return [base, v("no-point", lambda_point=0.0)]
    if name == "weights":
        out = [base]
        for f in (0.5, 2.0):
            out.append(v(f"scene x{f:g}", lambda_scene=d.lambda_scene * f))
            out.append(v(f"point x{f:g}", lambda_point=d.lambda_point * f))
        return out
    if name == "keypoint-count":
        return [v(f"fraction 1/{n}", keypoint_fraction=1.0 / n) for n in (20, 30, 60, 70)]
    if name == "selection-method":
        return [v(m, keypoint_method=m) for m in ("curvature", "random", "farthest")]
    raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")


def run_ablation(cfg: ExperimentConfig, name: str, steps: int = 8) -> list[BenchmarkRow]:
    """Distill each variant from the same teacher and evaluate the student at ``steps``."""
    variants = ablation_variants(cfg, name)
    train, test = load_data(cfg)
    sched = schedule_of(cfg)
    teacher = get_teacher(cfg, train, sched)
    rows = []
    for label, vcfg in variants:
        student = get_student(vcfg, teacher, train, sched)
        rows.append(evaluate_model(student, test, sched, student_sampler(vcfg, steps), vcfg, label))
    write_table(rows, Path(cfg.output_dir) / f"ablation_{name}.csv")
    return rows
