import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_net_cfg():
    from pcdistill.net import NetConfig

    return NetConfig(width=8, depth=3, t_embed=4, T=10)


@pytest.fixture(scope="session")
def sched10():
    from pcdistill.schedule import build_schedule

    return build_schedule(10, 1e-3, 0.2)


@pytest.fixture(scope="session")
def small_scene():
    from pcdistill.synth import generate_scene, random_spec

    g, p = generate_scene(random_spec(7))
    return p.points, g.points


TINY = {
    "seed": 0,
    "schedule": {"T": 10, "beta_start": 1.0e-3, "beta_end": 0.2},
    "net": {"width": 8, "depth": 2, "t_embed": 4, "T": 10},
    "data": {"n_train": 2, "n_test": 2, "seed": 0},
    "teacher": {"epochs": 2, "lr": 1.0e-3},
    "distill": {"iterations": 3, "k_nn": 16, "k_dup": 2, "inversion": "offset", "reduction": "mean"},
    "eval": {"teacher_steps": [10, 2], "student_steps": [2, 1], "k_dup": 2},
    "metrics": {"n_emd": 32},
}


@pytest.fixture
def tiny_config_file(tmp_path):
    """A YAML config small enough to run the whole pipeline in a few seconds."""
    import yaml

    d = dict(TINY, output_dir="run")
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(d))
    return path


DESK_SEEDS = (0, 1, 2)
DEFAULT_CONFIG = Path(__file__).parents[1] / "configs" / "default.yaml"


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    """The desk-scale benchmark and structural-loss ablation, one fresh run per seed.

    Returns {seed: {"dir", "rows", "ablation", "runtime"}}; ``runtime`` is the
    full teacher + distillation + evaluation wall time of that seed's pipeline.
    """
    from dataclasses import replace

    from pcdistill.trainer import load_config, read_table, run_ablation, run_pipeline

    root = tmp_path_factory.mktemp("desk")
    base = load_config(DEFAULT_CONFIG, env={})
    out = {}
    for seed in DESK_SEEDS:
        cfg = replace(base.with_seed(seed), output_dir=str(root / f"seed{seed}"))
        t0 = time.perf_counter()
        run_dir = run_pipeline(cfg)
        runtime = time.perf_counter() - t0
        rows = {r["row"]: r for r in read_table(run_dir / "benchmark.csv")}
        ablation = {r.row: r.cd for r in run_ablation(cfg, "no-structural")}
        out[seed] = {"dir": run_dir, "cfg": cfg, "rows": rows, "ablation": ablation, "runtime": runtime}
    return out


@pytest.fixture(scope="session")
def desk_teacher(desk_runs):
    from pcdistill.net import load_checkpoint
    from pcdistill.trainer import load_data

    run = desk_runs[DESK_SEEDS[0]]
    _, test = load_data(run["cfg"])
    return load_checkpoint(run["dir"] / "teacher.npz"), test


def pytest_terminal_summary(terminalreporter):
    from criteria import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in RESULTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
