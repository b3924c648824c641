"""Run one or more ablations over several seeds and print the median CD per variant.

    python scripts/run_ablations.py no-structural weights --seeds 0 1 2
"""

import argparse
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from pcdistill.trainer import ABLATIONS, load_config, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("names", nargs="+", choices=ABLATIONS)
    ap.add_argument("--config", default="configs/default.yaml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = load_config(args.config, args.overrides)
    for name in args.names:
        cds = {}
        for seed in args.seeds:
            cfg = replace(base.with_seed(seed), output_dir=str(Path(base.output_dir) / f"seed{seed}"))
            for row in run_ablation(cfg, name, steps=args.steps):
                cds.setdefault(row.row, []).append(row.cd)
        print(f"\n{name} (student@{args.steps}, median CD over seeds {args.seeds})")
        for label, vals in cds.items():
            print(f"  {label:<20}{np.median(vals):.4f}   per seed: " + " ".join(f"{v:.4f}" for v in vals))


if __name__ == "__main__":
    main()
