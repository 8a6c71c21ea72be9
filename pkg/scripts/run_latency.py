"""Batch-of-one latency and set-attention call counts, cached vs. naive.

    python scripts/run_latency.py --out runs/latency
"""

import argparse
from pathlib import Path

import numpy as np

from yolor.ccm import build_index_matrix
from yolor.data import SyntheticWorld, generate
from yolor.metrics import bench
from yolor.params import init_params

from _common import base_config, write_rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=8)
    ap.add_argument("--repetitions", type=int, default=100)
    ap.add_argument("--warmup", type=int, default=10)
    ap.add_argument("--k", type=int, nargs="+", default=[100, 1000])
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float64")
    ap.add_argument("--out", default="runs/latency")
    args = ap.parse_args()

    world = SyntheticWorld.create(args.seed)
    cfg = base_config(world, n=args.n)
    params = init_params(cfg, args.seed).astype(np.dtype(args.dtype))
    reqs = [s.request for s in generate(world, 20, cfg.m, args.n, seed=args.seed, truth_limit=0).samples]
    im = build_index_matrix(args.n, cfg.m)
    rows = []
    for mode, k in [("cached", None), ("naive", None)] + [("naive", k) for k in args.k]:
        r = bench(reqs, params, mode, args.repetitions, args.warmup, k, im, args.seed)
        rows.append({"mode": mode, "k": r.k if k else im.P, "mean_ms": r.mean_latency_ms, "p99_ms": r.p99_latency_ms,
                     "set_attention_calls": r.set_attention_per_request, "head_evals": r.head_evals_per_request})
    write_rows(Path(args.out), "latency", rows)


if __name__ == "__main__":
    main()
