"""Write the synthetic benchmark to disk as .xyz files plus manifest.json.

    python scripts/make_dataset.py data/desk --train 40 --test 20 --seed 0

Point a config at it with ``data.manifest: <dir>/manifest.json``.
"""

import argparse

from pcdistill.synth import generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--train", type=int, default=40)
    ap.add_argument("--test", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    m = generate_dataset(args.out, args.train, args.test, args.seed)
    n_scan = n_gt = 0
    for r in m.records:
        n_scan += sum(1 for _ in open(f"{args.out}/{r.scan}"))
        n_gt += sum(1 for _ in open(f"{args.out}/{r.gt}"))
    print(f"{len(m.records)} scenes in {args.out}: mean {n_scan / len(m.records):.0f} scan points, "
          f"{n_gt / len(m.records):.0f} ground-truth points")


if __name__ == "__main__":
    main()
