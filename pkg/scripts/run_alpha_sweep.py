"""Test GAUC as a function of the pairwise-loss weight alpha.

    python scripts/run_alpha_sweep.py --out runs/alpha
"""

import argparse
from pathlib import Path

from yolor.metrics import auc, gauc, records_from_arrays
from yolor.training import predict, train

from _common import base_config, dataset, labels_of, write_rows

GRID = (0.0, 0.01, 0.05, 0.1, 0.5)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--num-train", type=int, default=50_000)
    ap.add_argument("--num-test", type=int, default=5_000)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--hidden", default="1024,256,128")
    ap.add_argument("--out", default="runs/alpha")
    args = ap.parse_args()

    world, tr, te = dataset(args.seed, args.num_train, args.num_test)
    y = labels_of(te)
    rows = []
    for alpha in GRID:
        cfg = base_config(world, alpha=alpha, epochs=args.epochs,
                          hidden=tuple(int(h) for h in args.hidden.split(",")))
        params, reports = train(tr, cfg)
        p = predict(te, cfg, params)
        rows.append({"alpha": alpha, "auc": auc(p, y), "gauc": gauc(records_from_arrays(p, y)),
                     "ce": reports[-1].ce, "gbpr": reports[-1].gbpr})
    write_rows(Path(args.out), "alpha_sweep", rows)


if __name__ == "__main__":
    main()
