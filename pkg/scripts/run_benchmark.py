"""Run the desk-scale benchmark for several seeds and summarise it.

    python scripts/run_benchmark.py --config configs/default.yaml --seeds 0 1 2

Each seed gets its own directory under the config's output_dir; the summary
table holds the per-row median over seeds and is written to summary.csv.
"""

import argparse
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from pcdistill.trainer import BenchmarkRow, format_table, load_config, read_table, run_pipeline, write_table


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config, args.overrides)
    root = Path(base.output_dir)
    per_seed = {}
    for seed in args.seeds:
        cfg = replace(base.with_seed(seed), output_dir=str(root / f"seed{seed}"))
        t0 = time.perf_counter()
        out = run_pipeline(cfg)
        print(f"seed {seed}: {time.perf_counter() - t0:.0f}s, artifacts in {out}")
        per_seed[seed] = read_table(out / "benchmark.csv")

    names = [r["row"] for r in per_seed[args.seeds[0]]]
    summary = []
    for i, name in enumerate(names):
        recs = [per_seed[s][i] for s in args.seeds]
        summary.append(BenchmarkRow(name, *(float(np.median([r[c] for r in recs])) for c in ("cd", "jsd", "emd", "time")),
                                    config_hash=base.config_hash()))
    write_table(summary, root / "summary.csv")
    print(f"median over seeds {args.seeds}")
    print(format_table(summary))


if __name__ == "__main__":
    main()
