"""Component ablation on the synthetic block-context world.

Trains full YOLOR and the variants without IRM, TCEM and the pairwise loss
on the same data, and reports test AUC / GAUC next to the GAUC of the true
click probabilities (the ceiling any model can reach).

    python scripts/run_ablation.py --out runs/ablation
"""

import argparse
import time
from pathlib import Path

import numpy as np

from yolor.metrics import auc, gauc, records_from_arrays
from yolor.training import ablation_variant, predict, train

from _common import base_config, dataset, labels_of, write_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--num-train", type=int, default=50_000)
    ap.add_argument("--num-test", type=int, default=5_000)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--hidden", default="1024,256,128")
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    world, tr, te = dataset(args.seed, args.num_train, args.num_test)
    base = base_config(world, epochs=args.epochs, hidden=tuple(int(h) for h in args.hidden.split(",")))
    y = labels_of(te)
    rows = []
    for name, flags in (("yolor", ()), ("wo_irm", ("irm",)), ("wo_tcem", ("tcem",)), ("wo_gbpr", ("gbpr",))):
        cfg = ablation_variant(base, *flags)
        t0 = time.time()
        params, reports = train(tr, cfg)
        p = predict(te, cfg, params)
        rows.append({"variant": name, "auc": auc(p, y), "gauc": gauc(records_from_arrays(p, y)),
                     "final_loss": reports[-1].total, "seconds": round(time.time() - t0, 1)})
    truth = np.array([world.true_probs(s.request.user_profile_ids[0], s.request.context_ids[0],
                                       s.request.candidate_item_ids) for s in te])
    rows.append({"variant": "true_probabilities", "auc": auc(truth, y), "gauc": gauc(records_from_arrays(truth, y)),
                 "final_loss": float("nan"), "seconds": 0.0})
    write_rows(Path(args.out), "ablation", rows)


if __name__ == "__main__":
    main()
