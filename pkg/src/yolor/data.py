"""Dataset files, list filtering and the synthetic contextual click world.

Dataset file: JSON lines. Line 1 is a header
``{"format": "yolor-lists", "schema_version": 1, "m": m, "n": n}``; every
further line is one exposed list::

    {"request_id": "r17", "user_ids": [..], "context_ids": [..],
     "behavior_ids": [..], "items": [{"id": 5, "label": 1, "dense": [..]}, ..]}

``dense`` is optional. The ground-truth sidecar (``truth.jsonl``) holds one
line per request with its full candidate set, the true-probability-optimal
permutation (indices into ``candidates``) and totals; it doubles as a
request file for reranking.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .config import derive_seed
from .errors import FormatError, InputError
from .irm import RawRequest
from .tcem import tree_blocks

log = logging.getLogger(__name__)

DATASET_FORMAT = "yolor-lists"
SCHEMA_VERSION = 1


@dataclass
class ListSample:
    """One exposed list: the request restricted to the m shown items, in order."""
    request: RawRequest
    labels: list[int]

    @property
    def request_id(self) -> str:
        return self.request.request_id

    def to_record(self) -> dict:
        r = self.request
        items = []
        for t, (item, y) in enumerate(zip(r.candidate_item_ids, self.labels)):
            entry = {"id": int(item), "label": int(y)}
            if r.candidate_dense is not None:
                entry["dense"] = [float(v) for v in r.candidate_dense[t]]
            items.append(entry)
        return {"request_id": r.request_id, "user_ids": list(map(int, r.user_profile_ids)),
                "context_ids": list(map(int, r.context_ids)),
                "behavior_ids": list(map(int, r.behavior_item_ids)), "items": items}

    @classmethod
    def from_record(cls, rec: dict) -> "ListSample":
        items = rec["items"]
        dense = None
        if items and "dense" in items[0]:
            dense = np.array([it["dense"] for it in items], dtype=np.float64)
        req = RawRequest([int(v) for v in rec["user_ids"]], [int(v) for v in rec["context_ids"]],
                         [int(v) for v in rec["behavior_ids"]], [int(it["id"]) for it in items],
                         dense, str(rec.get("request_id", "")))
        labels = [int(it["label"]) for it in items]
        if any(y not in (0, 1) for y in labels):
            raise ValueError("labels must be 0 or 1")
        return cls(req, labels)


# ------------------------------------------------------------ reading / writing

def write_dataset(path: str | Path, samples: Iterable[ListSample], m: int, n: int | None = None) -> int:
    header = {"format": DATASET_FORMAT, "schema_version": SCHEMA_VERSION, "m": m, "n": n or m}
    count = 0
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
            count += 1
    return count


@dataclass
class LoadStats:
    parsed: int = 0
    malformed: int = 0
    bad_lines: list[int] = field(default_factory=list)


class DatasetReader:
    """Streaming reader; iterate it for samples, inspect ``stats`` afterwards."""

    def __init__(self, path: str | Path, m: int | None = None, error_budget: int = 100):
        self.path = Path(path)
        self.error_budget = error_budget
        self.stats = LoadStats()
        with open(self.path) as fh:
            first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{self.path}:1: header is not JSON") from exc
        if not isinstance(header, dict) or header.get("format") != DATASET_FORMAT:
            raise FormatError(f"{self.path}:1: not a {DATASET_FORMAT} file")
        if header.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"{self.path}:1: unsupported schema_version {header.get('schema_version')}")
        self.header = header
        self.m = int(header["m"])
        if m is not None and m != self.m:
            raise FormatError(f"{self.path}:1: file has m={self.m}, expected m={m}")

    def __iter__(self) -> Iterator[ListSample]:
        with open(self.path) as fh:
            next(fh)
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    sample = ListSample.from_record(json.loads(line))
                    if len(sample.labels) != self.m:
                        raise ValueError(f"{len(sample.labels)} items, expected {self.m}")
                except (ValueError, KeyError, TypeError) as exc:
                    self.stats.malformed += 1
                    self.stats.bad_lines.append(lineno)
                    log.warning("%s:%d: skipped malformed record (%s)", self.path, lineno, exc)
                    if self.stats.malformed > self.error_budget:
                        raise FormatError(f"{self.path}: more than {self.error_budget} malformed lines") from exc
                    continue
                self.stats.parsed += 1
                yield sample


def load_dataset(path: str | Path, m: int | None = None, error_budget: int = 100) -> DatasetReader:
    return DatasetReader(path, m, error_budget)


@dataclass
class FilterStats:
    kept: int = 0
    all_zero: int = 0
    all_one: int = 0


def filter_lists(samples: Iterable[ListSample], stats: FilterStats | None = None) -> Iterator[ListSample]:
    """Drop lists whose labels are all 0 or all 1."""
    stats = stats if stats is not None else FilterStats()
    for s in samples:
        total = sum(s.labels)
        if total == 0:
            stats.all_zero += 1
        elif total == len(s.labels):
            stats.all_one += 1
        else:
            stats.kept += 1
            yield s


def load_requests(path: str | Path) -> list[RawRequest]:
    """Requests from a truth/request file (``candidates``) or a dataset file (``items``)."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            rec = json.loads(line)
            if "format" in rec:
                continue
            if "candidates" in rec:
                cands = [int(c) for c in rec["candidates"]]
                dense = np.array(rec["candidate_dense"]) if rec.get("candidate_dense") is not None else None
            elif "items" in rec:
                cands = [int(it["id"]) for it in rec["items"]]
                dense = (np.array([it["dense"] for it in rec["items"]])
                         if rec["items"] and "dense" in rec["items"][0] else None)
            else:
                raise FormatError(f"{path}:{lineno}: record has neither candidates nor items")
            out.append(RawRequest(rec.get("user_ids", []), rec.get("context_ids", []),
                                  rec.get("behavior_ids", []), cands, dense, str(rec.get("request_id", lineno))))
    return out


# ------------------------------------------------------------ synthetic world

@dataclass
class SyntheticWorld:
    """Ground-truth click model.

    ``logit_t = base + quality[i_t] - pos_decay * t + affinity * [cat(i_t) == pref(u)]
    + context_bias[c] + sum_{j sharing a size-2 or size-4 block with t} W[i_t, j]``

    A partner in the size-2 block also shares the size-4 block, so it counts twice.
    """
    num_items: int
    num_categories: int
    num_users: int
    num_contexts: int
    quality: np.ndarray
    W: np.ndarray
    category: np.ndarray
    user_pref: np.ndarray
    context_bias: np.ndarray
    base: float = -1.0
    pos_decay: float = 0.1
    affinity: float = 1.5
    effect_sizes: tuple[int, ...] = (2, 4)
    max_behaviors: int = 8
    seed: int = 0

    @classmethod
    def create(cls, seed: int = 0, num_items: int = 200, num_categories: int = 8, num_users: int = 500,
               num_contexts: int = 4, quality_std: float = 0.7, influence_std: float = 1.0,
               pair_std: float = 0.0, **kw) -> "SyntheticWorld":
        rng = np.random.default_rng(derive_seed(seed, "world"))
        quality = rng.normal(0.0, quality_std, num_items)
        influence = rng.normal(0.0, influence_std, num_items)
        W = np.broadcast_to(influence[None, :], (num_items, num_items)).copy()
        if pair_std:
            W += rng.normal(0.0, pair_std, (num_items, num_items))
        np.fill_diagonal(W, 0.0)
        category = rng.integers(0, num_categories, num_items)
        user_pref = rng.integers(0, num_categories, num_users)
        context_bias = rng.normal(0.0, 0.2, num_contexts)
        return cls(num_items, num_categories, num_users, num_contexts, quality, W, category, user_pref,
                   context_bias, seed=seed, **kw)

    def share_matrix(self, m: int) -> np.ndarray:
        """(m, m) count of effect-carrying blocks shared by positions t != s."""
        layout = tree_blocks(m)
        M = np.zeros((m, m))
        for k, size in enumerate(layout.block_sizes, start=1):
            if size not in self.effect_sizes:
                continue
            for t in range(m):
                start, stop = layout.block_of(t, k)
                M[t, start:stop] += 1
        np.fill_diagonal(M, 0.0)
        return M

    def item_logits(self, user: int, context: int, items: np.ndarray) -> np.ndarray:
        """Context-free part of the logit for candidate items (no position term)."""
        items = np.asarray(items)
        match = self.category[items] == self.user_pref[user]
        return self.base + self.quality[items] + self.affinity * match + self.context_bias[context]

    def true_probs(self, user: int, context: int, items_in_order) -> np.ndarray:
        """True click probability per position of one ordered list."""
        items = np.asarray(items_in_order)
        m = len(items)
        logits = self.item_logits(user, context, items) - self.pos_decay * np.arange(m)
        logits = logits + (self.W[np.ix_(items, items)] * self.share_matrix(m)).sum(axis=1)
        return 1.0 / (1.0 + np.exp(-logits))

    def true_totals(self, user: int, context: int, candidates, perms: np.ndarray) -> np.ndarray:
        """Sum of true probabilities for many permutations (rows index ``candidates``)."""
        cands = np.asarray(candidates)
        P, m = perms.shape
        M = self.share_matrix(m)
        Wc = self.W[np.ix_(cands, cands)]
        base = self.item_logits(user, context, cands)
        out = np.empty(P)
        for s in range(0, P, 8192):
            p = perms[s:s + 8192]
            ctx = (Wc[p[:, :, None], p[:, None, :]] * M).sum(axis=2)
            logits = base[p] - self.pos_decay * np.arange(m) + ctx
            out[s:s + len(p)] = (1.0 / (1.0 + np.exp(-logits))).sum(axis=1)
        return out


def oracle_best(world: SyntheticWorld, user: int, context: int, candidates, m: int):
    """Exhaustive search for the true-probability-optimal ordered list.

    Returns ``(permutation as candidate indices, total)``; ties go to the
    lexicographically smallest permutation.
    """
    n = len(candidates)
    perms = np.array(list(itertools.permutations(range(n), m)), dtype=np.int64)
    totals = world.true_totals(user, context, candidates, perms)
    best = int(np.argmax(totals))
    return perms[best].tolist(), float(totals[best])


def _sample_request(world: SyntheticWorld, rng: np.random.Generator, n: int, request_id: str):
    user = int(rng.integers(world.num_users))
    context = int(rng.integers(world.num_contexts))
    pref = world.user_pref[user]
    in_pref = np.flatnonzero(world.category == pref)
    nb = int(rng.integers(0, world.max_behaviors + 1))
    behaviors = [int(rng.choice(in_pref)) if rng.random() < 0.8 and len(in_pref) else int(rng.integers(world.num_items))
                 for _ in range(nb)]
    chosen: list[int] = []
    while len(chosen) < n:
        pick = int(rng.choice(in_pref)) if rng.random() < 0.4 and len(in_pref) else int(rng.integers(world.num_items))
        if pick not in chosen:
            chosen.append(pick)
    return user, context, behaviors, chosen


@dataclass
class GeneratedData:
    samples: list[ListSample]
    truth: list[dict]


def generate(world: SyntheticWorld, num_lists: int, m: int, n: int, seed: int = 0,
             truth_limit: int | None = None, id_prefix: str = "r") -> GeneratedData:
    """Sample requests, expose m of n candidates in random order, draw clicks.

    Ground truth (exhaustive search over all A(n, m) orders) is computed for
    the first ``truth_limit`` requests (all when None).
    """
    if n < m:
        raise InputError(f"n={n} must be >= m={m}")
    rng = np.random.default_rng(derive_seed(seed, "generate", id_prefix, num_lists, m, n))
    perms = None
    samples, truth = [], []
    for r in range(num_lists):
        rid = f"{id_prefix}{r}"
        user, context, behaviors, cands = _sample_request(world, rng, n, rid)
        shown = rng.permutation(n)[:m]
        items = [cands[i] for i in shown]
        p = world.true_probs(user, context, items)
        labels = (rng.random(m) < p).astype(int).tolist()
        req = RawRequest([user], [context], behaviors, items, None, rid)
        samples.append(ListSample(req, labels))
        if truth_limit is None or r < truth_limit:
            if perms is None:
                perms = np.array(list(itertools.permutations(range(n), m)), dtype=np.int64)
            totals = world.true_totals(user, context, cands, perms)
            best = int(np.argmax(totals))
            truth.append({"request_id": rid, "user_ids": [user], "context_ids": [context],
                          "behavior_ids": behaviors, "candidates": cands,
                          "best_permutation": perms[best].tolist(), "best_total": float(totals[best]),
                          "exposed": shown.tolist(), "exposed_total": float(p.sum())})
    return GeneratedData(samples, truth)


def write_truth(path: str | Path, truth: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in truth:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_truth(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
