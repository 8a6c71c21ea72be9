"""``yolor`` command line: gen-data, train, evaluate, rerank, bench, ablate, sweep-alpha.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure. Failures
print one line ``error: <ErrorClass>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .ccm import load_or_build_index, rerank
from .config import Config, ConfigError
from .data import (SyntheticWorld, filter_lists, generate, load_dataset, load_requests, write_dataset,
                   write_truth)
from .errors import FormatError, InputError
from .metrics import auc, bench, gauc, hit_ratio, hr_trials, records_from_arrays
from .params import ModelParams, init_params
from .tcem import context_layout
from .training import ablation_variant, batch_loss, predict, train

log = logging.getLogger("yolor")

OUT_ENV = "YOLOR_OUT"
ALPHA_GRID = (0.0, 0.01, 0.05, 0.1, 0.5)
WORLD_DEFAULTS = {"num_items": 200, "num_categories": 8, "num_users": 500, "num_contexts": 4}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: UsageError: {message}", file=sys.stderr)
        raise SystemExit(2)


def build_id() -> str:
    """Hash of the package sources, stable across runs of the same code."""
    h = hashlib.sha1()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:12]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV, "runs") + f"/{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_config(args) -> Config:
    cfg = Config.load(args.config) if args.config else Config()
    kv = {}
    for key in ("seed", "alpha", "epochs", "n", "m"):
        val = getattr(args, key, None)
        if val is not None:
            kv[key] = val
    if getattr(args, "ablate", None):
        kv["ablate"] = sorted(set(cfg.ablate) | set(args.ablate))
    cfg = cfg.override(**kv) if kv else cfg
    if getattr(args, "set", None):
        cfg = cfg.apply_overrides(args.set)
    return cfg.validate()


def _meta(cfg: Config) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.digest(), "build_id": build_id()}


def _load_samples(path, cfg: Config):
    reader = load_dataset(path, m=cfg.m)
    samples = list(filter_lists(reader))
    log.info("%s: %d lists kept (%d malformed)", path, len(samples), reader.stats.malformed)
    return samples


def _evaluate(samples, cfg: Config, params: ModelParams) -> dict:
    preds = predict(samples, cfg, params)
    labels = np.array([s.labels for s in samples])
    report, _ = batch_loss(preds, labels, cfg.effective_alpha)
    return {"lists": len(samples), "auc": auc(preds, labels),
            "gauc": gauc(records_from_arrays(preds, labels, [s.request_id for s in samples])),
            "ce": report.ce, "gbpr": report.gbpr}


def _train_to(out: Path, cfg: Config, train_path) -> ModelParams:
    samples = _load_samples(train_path, cfg)
    rows = []
    params, reports = train(samples, cfg,
                            on_epoch=lambda e, r: log.info("epoch %d total=%.5f", e, r.total))
    for e, r in enumerate(reports, start=1):
        rows.append({"epoch": e, **r.as_dict()})
    cfg.save(out / "config.json")
    params.save(out / "model.npz")
    _write_csv(out / "losses.csv", rows)
    return params


def _data_file(args, name: str) -> Path:
    explicit = getattr(args, name, None)
    if explicit:
        return Path(explicit)
    if args.data:
        return Path(args.data) / f"{name}.jsonl"
    raise UsageError(f"need --{name} or --data")


# ------------------------------------------------------------ commands

def cmd_gen_data(args) -> None:
    out = _out_dir(args)
    cfg = _resolve_config(args)
    world_kw = {k: getattr(args, k) for k in WORLD_DEFAULTS}
    world = SyntheticWorld.create(cfg.seed, **world_kw)
    tr = generate(world, args.num_train, cfg.m, cfg.m, seed=cfg.seed, truth_limit=0, id_prefix="train")
    te = generate(world, args.num_test, cfg.m, cfg.m, seed=cfg.seed, truth_limit=0, id_prefix="test")
    rq = generate(world, args.num_requests, cfg.m, cfg.n, seed=cfg.seed, id_prefix="req")
    write_dataset(out / "train.jsonl", tr.samples, cfg.m)
    write_dataset(out / "test.jsonl", te.samples, cfg.m)
    write_truth(out / "truth.jsonl", rq.truth)
    cfg = cfg.override(user_vocab=world.num_users, item_vocab=world.num_items, context_vocab=world.num_contexts)
    cfg.save(out / "config.json")
    _write_json(out / "world.json", {"seed": cfg.seed, **world_kw})
    log.info("wrote %d train, %d test lists and %d requests to %s", len(tr.samples), len(te.samples),
             len(rq.truth), out)


def cmd_train(args) -> None:
    out = _out_dir(args)
    cfg = _resolve_config(args)
    _train_to(out, cfg, _data_file(args, "train"))


def _load_checkpoint(args) -> ModelParams:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    return ModelParams.load(args.checkpoint)


def cmd_evaluate(args) -> None:
    out = _out_dir(args)
    params = _load_checkpoint(args)
    cfg = params.config
    res = _evaluate(_load_samples(_data_file(args, "test"), cfg), cfg, params)
    _write_json(out / "metrics.json", {**res, **_meta(cfg)})
    print(json.dumps({k: res[k] for k in ("auc", "gauc")}, sort_keys=True))


def _inference_setup(args):
    params = _load_checkpoint(args) if args.checkpoint else init_params(_resolve_config(args))
    params = params.astype(np.float64)
    requests = load_requests(_data_file(args, "truth") if not args.requests else args.requests)
    if not requests:
        raise InputError("no requests")
    cfg = params.config
    n = requests[0].n
    index = load_or_build_index(n, cfg.m, context_layout(cfg), args.index_dir, cfg.max_permutations)
    return params, requests, index


def cmd_rerank(args) -> None:
    out = _out_dir(args)
    params, requests, index = _inference_setup(args)
    weights = [float(w) for w in args.weights.split(",")] if args.weights else None
    with open(out / "rerank.jsonl", "w") as fh:
        for req in requests:
            res = rerank(req, params, weights, index)
            fh.write(json.dumps({"request_id": req.request_id, "best_index": res.best_index,
                                 "best_permutation": res.best_permutation, "best_items": res.best_items,
                                 "best_score": round(res.best_score, 12)}, sort_keys=True) + "\n")
    log.info("reranked %d requests -> %s", len(requests), out / "rerank.jsonl")


def cmd_bench(args) -> None:
    out = _out_dir(args)
    params, requests, index = _inference_setup(args)
    cfg = params.config
    modes = ["cached", "naive"] if args.mode == "both" else [args.mode]
    ks = args.k or [100]
    counts, timing = [], []
    for mode in modes:
        for k in (ks if mode == "naive" else [None]):
            r = bench(requests, params, mode, args.repetitions, args.warmup, k, index, seed=cfg.seed)
            counts.append({"mode": mode, "k": r.k, "set_attention_per_request": r.set_attention_per_request,
                           "head_evals_per_request": r.head_evals_per_request})
            timing.append({"mode": mode, "k": r.k, "mean_ms": r.mean_latency_ms, "p99_ms": r.p99_latency_ms})
    hr_rows = [{"gsu": "full", "k": index.P,
                "hr": hit_ratio(hr_trials(requests, params, index, "full"))}]
    for k in ks:
        hr_rows.append({"gsu": "random", "k": k, "hr": hit_ratio(
            hr_trials(requests, params, index, "random", k=k, draws=args.draws, seed=cfg.seed))})
    hr_rows.append({"gsu": "beam", "k": args.beam,
                    "hr": hit_ratio(hr_trials(requests, params, index, "beam", beam=args.beam))})
    _write_json(out / "bench_metrics.json", {"counts": counts, "hit_ratio": hr_rows, "permutations": index.P,
                                             **_meta(cfg)})
    _write_csv(out / "bench_timing.csv", timing)
    print(json.dumps({"counts": counts, "hit_ratio": hr_rows}, sort_keys=True))


def _train_eval_rows(args, variants: list[tuple[str, Config]]) -> list[dict]:
    out = _out_dir(args)
    test = _data_file(args, "test")
    rows = []
    for name, cfg in variants:
        sub = out / name
        sub.mkdir(exist_ok=True)
        params = _train_to(sub, cfg, _data_file(args, "train"))
        res = _evaluate(_load_samples(test, cfg), cfg, params)
        rows.append({"variant": name, "alpha": cfg.effective_alpha, "auc": res["auc"], "gauc": res["gauc"]})
        log.info("%s: auc=%.4f gauc=%.4f", name, res["auc"], res["gauc"])
    return rows


def cmd_ablate(args) -> None:
    cfg = _resolve_config(args)
    variants = [("yolor", cfg)] + [(f"wo_{f}", ablation_variant(cfg, f)) for f in ("irm", "tcem", "gbpr")]
    rows = _train_eval_rows(args, variants)
    _write_csv(_out_dir(args) / "ablation.csv", rows)
    print(json.dumps(rows))


def cmd_sweep_alpha(args) -> None:
    cfg = _resolve_config(args)
    rows = _train_eval_rows(args, [(f"alpha_{a:g}", cfg.override(alpha=a)) for a in ALPHA_GRID])
    _write_csv(_out_dir(args) / "sweep_alpha.csv", rows)
    print(json.dumps(rows))


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="yolor", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        sp.add_argument("--n", type=int)
        sp.add_argument("--m", type=int)
        if data:
            sp.add_argument("--data", help="directory written by gen-data")

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(g, data=False)
    g.add_argument("--num-train", type=int, default=50_000)
    g.add_argument("--num-test", type=int, default=5_000)
    g.add_argument("--num-requests", type=int, default=200)
    for k, v in WORLD_DEFAULTS.items():
        g.add_argument(f"--{k.replace('_', '-')}", dest=k, type=int, default=v)
    g.set_defaults(func=cmd_gen_data)

    def training_flags(sp):
        sp.add_argument("--train")
        sp.add_argument("--test")
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--ablate", action="append", choices=["irm", "tcem", "gbpr"])

    t = sub.add_parser("train", help="train a model")
    common(t)
    training_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="AUC/GAUC of a checkpoint on a test file")
    common(e)
    e.add_argument("--checkpoint")
    e.add_argument("--test")
    e.set_defaults(func=cmd_evaluate)

    def inference_flags(sp):
        sp.add_argument("--checkpoint")
        sp.add_argument("--requests")
        sp.add_argument("--truth", help=argparse.SUPPRESS)
        sp.add_argument("--index-dir", help="where index-matrix files are cached")

    r = sub.add_parser("rerank", help="best list per request")
    common(r)
    inference_flags(r)
    r.add_argument("--weights", help="comma-separated per-position weights")
    r.set_defaults(func=cmd_rerank)

    b = sub.add_parser("bench", help="latency, call counts and hit ratio")
    common(b)
    inference_flags(b)
    b.add_argument("--mode", choices=["cached", "naive", "both"], default="both")
    b.add_argument("--k", type=int, nargs="+", help="sampled lists for naive mode / random selector")
    b.add_argument("--beam", type=int, default=3)
    b.add_argument("--repetitions", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--draws", type=int, default=10, help="random-K draws per request for hit ratio")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("ablate", help="train and evaluate YOLOR and its ablations")
    common(a)
    training_flags(a)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("sweep-alpha", help="train and evaluate over the alpha grid")
    common(s)
    training_flags(s)
    s.set_defaults(func=cmd_sweep_alpha)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (InputError, FormatError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
