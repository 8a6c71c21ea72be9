"""Hit ratio of cheap list selectors against exhaustive cached search.

For each request the evaluator's best list over all A(n, m) permutations is
the target; a selector hits when that list is among the ones it proposes.
Selectors: full enumeration, K uniformly random permutations, and beam
search over per-item scores with an empty context.

    python scripts/run_hit_ratio.py --requests 1000 --out runs/hr
"""

import argparse
from pathlib import Path

import numpy as np

from yolor.ccm import argmax_list, build_cache, build_index_matrix, score_all_permutations
from yolor.data import generate
from yolor.irm import semantic_encode
from yolor.metrics import beam_candidates, gsu_random_k
from yolor.params import init_params
from yolor.training import train

from _common import base_config, dataset, write_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--requests", type=int, default=1000)
    ap.add_argument("--draws", type=int, default=10, help="random-K draws per request")
    ap.add_argument("--k", type=int, nargs="+", default=[100, 1000, 10_000])
    ap.add_argument("--beam", type=int, nargs="+", default=[1, 3, 10])
    ap.add_argument("--train-lists", type=int, default=0, help="train on this many lists first (0: random init)")
    ap.add_argument("--out", default="runs/hr")
    args = ap.parse_args()

    world, tr, _ = dataset(args.seed, max(args.train_lists, 1), 1)
    cfg = base_config(world, hidden=(64, 32))
    params = train(tr, cfg)[0] if args.train_lists else init_params(cfg, args.seed)
    params = params.astype(np.float64)
    requests = generate(world, args.requests, 8, 8, seed=args.seed + 3, truth_limit=0, id_prefix="q").samples
    im = build_index_matrix(8, 8)
    rng = np.random.default_rng(args.seed)
    hits = {("full", im.P): [0, 0]}
    hits.update({("random", k): [0, 0] for k in args.k})
    hits.update({("beam", b): [0, 0] for b in args.beam})
    for s in requests:
        X_s = semantic_encode(s.request, params)
        best = argmax_list(score_all_permutations(build_cache(X_s, params), im, params))[0]
        hits[("full", im.P)][0] += 1
        hits[("full", im.P)][1] += 1
        for k in args.k:
            for _ in range(args.draws):
                hits[("random", k)][0] += int(best in set(gsu_random_k(im.P, k, rng).tolist()))
                hits[("random", k)][1] += 1
        for b in args.beam:
            hits[("beam", b)][0] += int(best in set(beam_candidates(X_s, params, b).tolist()))
            hits[("beam", b)][1] += 1
    rows = [{"selector": sel, "k": k, "trials": t, "hr": h / t, "expected_random": min(k, im.P) / im.P}
            for (sel, k), (h, t) in hits.items()]
    write_rows(Path(args.out), "hit_ratio", rows)


if __name__ == "__main__":
    main()
