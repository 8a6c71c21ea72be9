"""AUC / GAUC, hit ratio with cheap list selectors, and the latency bench."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .ccm import IndexMatrix, argmax_list, build_cache, build_index_matrix, permutation_rank, score_all_permutations
from .instrument import COUNTERS
from .irm import RawRequest, semantic_encode
from .params import ModelParams
from .tcem import head_forward, score_lists


class UndefinedMetricError(ValueError):
    pass


@dataclass
class EvalRecord:
    list_id: str
    scores: np.ndarray
    labels: np.ndarray


@dataclass
class HRTrial:
    request_id: str
    best_index: int
    candidates: np.ndarray


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC needs both classes, got {n_pos} positives and {n_neg} negatives")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(records: list[EvalRecord], weighted: bool = False) -> float:
    """Mean per-list AUC; lists with a single class are skipped.

    ``weighted`` weights each list by its length.
    """
    vals, weights = [], []
    for r in records:
        labels = np.asarray(r.labels)
        if labels.all() or not labels.any():
            continue
        vals.append(auc(r.scores, labels))
        weights.append(len(labels))
    if not vals:
        raise UndefinedMetricError("no list with both clicks and non-clicks")
    if weighted:
        return float(np.average(vals, weights=weights))
    return float(np.mean(vals))


def records_from_arrays(preds: np.ndarray, labels: np.ndarray, ids=None) -> list[EvalRecord]:
    ids = ids if ids is not None else [str(i) for i in range(len(preds))]
    return [EvalRecord(i, p, y) for i, p, y in zip(ids, preds, labels)]


def hit_ratio(trials: list[HRTrial]) -> float:
    if not trials:
        raise UndefinedMetricError("no trials")
    hits = sum(1 for t in trials if np.any(np.asarray(t.candidates) == t.best_index))
    return hits / len(trials)


# ------------------------------------------------------------ list selectors

def gsu_random_k(P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """K distinct permutation indices drawn uniformly from range(P)."""
    return rng.choice(P, size=min(K, P), replace=False)


def gsu_beam_search(X_s: np.ndarray, params: ModelParams, beam: int) -> list[list[int]]:
    """Beam search over positions scoring each (item, position) with an empty context.

    Returns up to ``beam`` complete lists as candidate indices, best first.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    cfg = params.config
    n, D = X_s.shape
    m = cfg.m
    E_p = params["pos_emb"].value.astype(X_s.dtype, copy=False)
    width = params["head_w"].value.shape[0] - 2 * D
    pos = np.repeat(E_p[:, None, :], n, axis=1)
    xs = np.broadcast_to(X_s[None], (m, n, D))
    point, _ = head_forward(pos, xs, np.zeros((m, n, width), dtype=X_s.dtype), params)
    partial: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    for t in range(m):
        grown = [(s + float(point[t, i]), seq + (i,)) for s, seq in partial for i in range(n) if i not in seq]
        grown.sort(key=lambda e: (-e[0], e[1]))
        partial = grown[:beam]
    return [list(seq) for _, seq in partial]


def beam_candidates(X_s: np.ndarray, params: ModelParams, beam: int) -> np.ndarray:
    n = X_s.shape[0]
    return np.array([permutation_rank(p, n) for p in gsu_beam_search(X_s, params, beam)])


# ------------------------------------------------------------ bench

@dataclass
class BenchResult:
    mode: str
    requests: int
    repetitions: int
    k: int
    mean_latency_ms: float
    p99_latency_ms: float
    set_attention_per_request: float
    head_evals_per_request: float

    def as_dict(self) -> dict:
        return asdict(self)


def _one_request(req: RawRequest, params: ModelParams, index: IndexMatrix, mode: str, k: int | None,
                 rng: np.random.Generator):
    X_s = semantic_encode(req, params)
    if mode == "cached":
        cache = build_cache(X_s, params)
        scores = score_all_permutations(cache, index, params, chunk_size=params.config.chunk_size,
                                        workers=params.config.workers)
        return argmax_list(scores)[0], None
    if mode == "naive":
        cand = np.arange(index.P) if k is None else np.sort(gsu_random_k(index.P, k, rng))
        scores = score_lists(np.asarray(index.perms)[cand], X_s, params, chunk_size=params.config.chunk_size)
        return int(cand[argmax_list(scores)[0]]), cand
    raise ValueError(f"unknown bench mode {mode!r}")


def bench(requests: list[RawRequest], params: ModelParams, mode: str = "cached", repetitions: int = 100,
          warmup: int = 10, k: int | None = None, index: IndexMatrix | None = None, seed: int = 0) -> BenchResult:
    """Batch-of-one latency and per-request call counts.

    Requests are cycled; warmup iterations are timed but discarded. ``k``
    limits naive mode to that many uniformly sampled permutations (all
    permutations when None).
    """
    if not requests:
        raise ValueError("bench needs at least one request")
    n = requests[0].n
    cfg = params.config
    if index is None:
        from .tcem import context_layout
        index = build_index_matrix(n, cfg.m, context_layout(cfg), cfg.max_permutations)
    rng = np.random.default_rng(seed)
    for i in range(warmup):
        _one_request(requests[i % len(requests)], params, index, mode, k, rng)
    before = COUNTERS.snapshot()
    lat = []
    for i in range(repetitions):
        t0 = time.perf_counter()
        _one_request(requests[i % len(requests)], params, index, mode, k, rng)
        lat.append((time.perf_counter() - t0) * 1e3)
    after = COUNTERS.snapshot()
    p99 = float(np.percentile(lat, 99)) if lat else 0.0
    return BenchResult(mode, len(requests), repetitions, -1 if k is None else k, statistics.fmean(lat), p99,
                       (after["set_attention"] - before["set_attention"]) / repetitions,
                       (after["head_evals"] - before["head_evals"]) / repetitions)


def hr_trials(requests: list[RawRequest], params: ModelParams, index: IndexMatrix, gsu: str, k: int = 100,
              beam: int = 3, draws: int = 1, seed: int = 0) -> list[HRTrial]:
    """Evaluator argmax (full cached enumeration) vs. the lists a selector proposes.

    ``gsu`` is ``"full"``, ``"random"`` (``draws`` independent K-samples per
    request) or ``"beam"``.
    """
    rng = np.random.default_rng(seed)
    trials = []
    for req in requests:
        X_s = semantic_encode(req, params)
        scores = score_all_permutations(build_cache(X_s, params), index, params,
                                        chunk_size=params.config.chunk_size)
        best = argmax_list(scores)[0]
        if gsu == "full":
            trials.append(HRTrial(req.request_id, best, np.arange(index.P)))
        elif gsu == "random":
            for _ in range(draws):
                trials.append(HRTrial(req.request_id, best, gsu_random_k(index.P, k, rng)))
        elif gsu == "beam":
            trials.append(HRTrial(req.request_id, best, beam_candidates(X_s, params, beam)))
        else:
            raise ValueError(f"unknown selector {gsu!r}")
    return trials
