"""Context cache: score every ordered list of m out of n candidates.

Every block embedding a permutation could need is a function of an item
*set*, so all subsets of each block size are encoded once per request
(``build_cache``). A request-independent index tensor maps each
(permutation, position, level) to its cache slot (``build_index_matrix``),
after which scoring all A(n, m) lists is a gather plus one affine head per
position.
"""

from __future__ import annotations

import itertools
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, InputError, ResourceError
from .instrument import COUNTERS, timed
from .irm import RawRequest, semantic_encode
from .params import ModelParams
from .tcem import TreeLayout, context_layout, head_forward, set_attention_forward, tree_blocks

INDEX_MAGIC = b"YOLORIDX"
INDEX_FORMAT_VERSION = 1
# magic, version, layout kind, n, m, P, L
_HEADER = struct.Struct("<8sHHIIQI")
LAYOUT_TREE, LAYOUT_GLOBAL = 0, 1


def permutation_count(n: int, m: int) -> int:
    return math.perm(n, m)


def _layout_for(m: int, layout: TreeLayout | None) -> TreeLayout:
    if layout is None:
        return tree_blocks(m)
    if layout.m != m:
        raise ConsistencyError(f"layout built for m={layout.m}, asked for m={m}")
    return layout


def enumerate_subsets(n: int, m: int, layout: TreeLayout | None = None) -> list[tuple[int, ...]]:
    """All item subsets a block can hold, size-major (largest first), then lexicographic."""
    if m > n:
        raise InputError(f"m={m} exceeds candidate count n={n}")
    layout = _layout_for(m, layout)
    keys: list[tuple[int, ...]] = []
    for b in layout.block_sizes:
        keys.extend(itertools.combinations(range(n), b))
    return keys


def _masks(items: np.ndarray) -> np.ndarray:
    """Bitmask of each row of item indices (last axis)."""
    return np.bitwise_or.reduce(np.left_shift(np.int64(1), items.astype(np.int64)), axis=-1)


@dataclass
class ContextCache:
    """Subset key -> slot -> D-vector, plus the n item-level semantic rows."""
    n: int
    m: int
    layout: TreeLayout
    keys: list[tuple[int, ...]]
    embeddings: np.ndarray
    X_s: np.ndarray
    _slots: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        self._slots = {k: i for i, k in enumerate(self.keys)}
        self._sorted_masks = None

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def stored_embeddings(self) -> int:
        return len(self.keys) + self.n

    def slot(self, key) -> int:
        return self._slots[tuple(sorted(key))]

    def lookup(self, key) -> np.ndarray:
        return self.embeddings[self.slot(key)]

    def slots_for(self, items: np.ndarray) -> np.ndarray:
        """Vectorised slot lookup for blocks given as (..., b) item arrays."""
        if self._sorted_masks is None:
            masks = _masks(np.array([list(k) + [k[0]] * (max(map(len, self.keys)) - len(k))
                                     for k in self.keys]))
            order = np.argsort(masks, kind="stable")
            self._sorted_masks = (masks[order], order)
        sorted_masks, order = self._sorted_masks
        want = _masks(items)
        pos = np.searchsorted(sorted_masks, want)
        pos = np.minimum(pos, len(sorted_masks) - 1)
        if not np.array_equal(sorted_masks[pos], want):
            raise ConsistencyError("a requested block is missing from the cache")
        return order[pos]


def build_cache(X_s: np.ndarray, params: ModelParams, keys: list[tuple[int, ...]] | None = None) -> ContextCache:
    """Encode every subset key once (all keys of the layout unless ``keys`` is given)."""
    cfg = params.config
    n = X_s.shape[0]
    layout = context_layout(cfg)
    if keys is None:
        keys = enumerate_subsets(n, cfg.m, layout)
    D = X_s.shape[1]
    emb = np.zeros((len(keys), D), dtype=X_s.dtype)
    sizes = layout.block_sizes
    by_size: dict[int, list[int]] = {}
    for i, k in enumerate(keys):
        by_size.setdefault(len(k), []).append(i)
    for b, idx in by_size.items():
        if b not in sizes:
            raise InputError(f"subset size {b} is not a block size of the layout {sizes}")
        level = sizes.index(b) + 1
        items = np.array([keys[i] for i in idx], dtype=np.int64)
        emb[idx] = set_attention_forward(X_s[items], params, level)[0]
    return ContextCache(n, cfg.m, layout, list(keys), emb, X_s)


# ------------------------------------------------------------ index matrix

@dataclass
class IndexMatrix:
    """Permutation table (P x m) and slot indices (P x m x L) for one (n, m, layout)."""
    n: int
    m: int
    layout_kind: int
    perms: np.ndarray
    index: np.ndarray

    @property
    def P(self) -> int:
        return self.perms.shape[0]

    @property
    def L(self) -> int:
        return self.index.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.index.shape

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(INDEX_MAGIC, INDEX_FORMAT_VERSION, self.layout_kind,
                                  self.n, self.m, self.P, self.L))
            fh.write(np.ascontiguousarray(self.perms, dtype="<i4").tobytes())
            fh.write(np.ascontiguousarray(self.index, dtype="<i4").tobytes())

    @classmethod
    def load(cls, path: str | Path, mmap: bool = True) -> "IndexMatrix":
        path = Path(path)
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, kind, n, m, P, L = _HEADER.unpack(raw)
        if magic != INDEX_MAGIC:
            raise FormatError(f"{path}: not an index-matrix file")
        if version != INDEX_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported index format version {version}")
        expected = _HEADER.size + 4 * (P * m + P * m * L)
        if path.stat().st_size != expected:
            raise FormatError(f"{path}: size {path.stat().st_size} != {expected} implied by header")
        off = _HEADER.size
        if mmap:
            perms = np.memmap(path, dtype="<i4", mode="r", offset=off, shape=(P, m))
            index = np.memmap(path, dtype="<i4", mode="r", offset=off + 4 * P * m, shape=(P, m, L))
        else:
            data = np.fromfile(path, dtype="<i4", offset=off)
            perms = data[:P * m].reshape(P, m)
            index = data[P * m:].reshape(P, m, L)
        return cls(n, m, kind, perms, index)


def permutation_table(n: int, m: int) -> np.ndarray:
    """All ordered m-subsets of range(n) in lexicographic order."""
    P = permutation_count(n, m)
    flat = np.fromiter(itertools.chain.from_iterable(itertools.permutations(range(n), m)),
                       dtype=np.int32, count=P * m)
    return flat.reshape(P, m)


def permutation_rank(perm, n: int) -> int:
    """Lexicographic index of ``perm`` inside ``permutation_table(n, len(perm))``."""
    m = len(perm)
    remaining = list(range(n))
    rank = 0
    for t, item in enumerate(perm):
        pos = remaining.index(int(item))
        rank += pos * math.perm(n - t - 1, m - t - 1)
        remaining.pop(pos)
    return rank


def slot_indices(perms: np.ndarray, layout: TreeLayout, cache_like: ContextCache) -> np.ndarray:
    """(P, m, L) slot of the block holding each position, per level."""
    P, m = perms.shape
    out = np.empty((P, m, layout.depth), dtype=np.int32)
    for k, blocks in enumerate(layout.levels):
        for start, stop in blocks:
            slots = cache_like.slots_for(perms[:, start:stop])
            out[:, start:stop, k] = slots[:, None]
    return out


def build_index_matrix(n: int, m: int, layout: TreeLayout | None = None,
                       max_permutations: int = 5_000_000) -> IndexMatrix:
    """Request-independent permutation table and slot-index tensor."""
    layout = _layout_for(m, layout)
    if m > n:
        raise InputError(f"m={m} exceeds candidate count n={n}")
    P = permutation_count(n, m)
    if P > max_permutations:
        raise ResourceError(f"A({n},{m})={P} permutations exceeds max_permutations={max_permutations}; "
                            "use sampled scoring instead")
    perms = permutation_table(n, m)
    keys = enumerate_subsets(n, m, layout)
    # slot numbering only depends on the key list, so a value-less cache suffices
    skeleton = ContextCache(n, m, layout, keys, np.zeros((len(keys), 0)), np.zeros((n, 0)))
    kind = LAYOUT_TREE if layout == tree_blocks(m) else LAYOUT_GLOBAL
    return IndexMatrix(n, m, kind, perms, slot_indices(perms, layout, skeleton))


def load_or_build_index(n: int, m: int, layout: TreeLayout, cache_dir: str | Path | None,
                        max_permutations: int = 5_000_000) -> IndexMatrix:
    """Reuse ``cache_dir/index_n{n}_m{m}_{kind}.bin`` when present, else build and store it."""
    kind = LAYOUT_TREE if layout == tree_blocks(m) else LAYOUT_GLOBAL
    if cache_dir is not None:
        path = Path(cache_dir) / f"index_n{n}_m{m}_{'tree' if kind == LAYOUT_TREE else 'global'}.bin"
        if path.exists():
            return IndexMatrix.load(path)
    im = build_index_matrix(n, m, layout, max_permutations)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        im.save(path)
    return im


# ------------------------------------------------------------ scoring

def _check_pair(cache: ContextCache, index: IndexMatrix) -> None:
    kind = LAYOUT_TREE if cache.layout == tree_blocks(cache.m) else LAYOUT_GLOBAL
    if (cache.n, cache.m, kind) != (index.n, index.m, index.layout_kind):
        raise ConsistencyError(f"cache is for (n={cache.n}, m={cache.m}, layout={kind}) but index is for "
                               f"(n={index.n}, m={index.m}, layout={index.layout_kind})")


def score_permutations(cache: ContextCache, perms: np.ndarray, slots: np.ndarray, params: ModelParams,
                       weights=None) -> np.ndarray:
    """Gather + head for explicit permutation rows and their slot indices."""
    X_s = cache.X_s
    C, m = perms.shape
    ctx = cache.embeddings[slots].reshape(C, m, -1)
    E_p = params["pos_emb"].value.astype(X_s.dtype, copy=False)
    y, _ = head_forward(E_p, X_s[perms], ctx, params)
    if weights is None:
        return y.sum(axis=1)
    return y @ np.asarray(weights, dtype=y.dtype)


def score_all_permutations(cache: ContextCache, index: IndexMatrix, params: ModelParams, weights=None,
                           chunk_size: int = 4096, workers: int = 1) -> np.ndarray:
    """Scores of all P permutations, in permutation-table order."""
    _check_pair(cache, index)
    if weights is not None and len(weights) != cache.m:
        raise InputError(f"expected {cache.m} position weights, got {len(weights)}")
    out = np.empty(index.P, dtype=cache.X_s.dtype)
    bounds = [(s, min(s + chunk_size, index.P)) for s in range(0, index.P, chunk_size)]

    def run(bound):
        s, e = bound
        out[s:e] = score_permutations(cache, np.asarray(index.perms[s:e]), np.asarray(index.index[s:e]),
                                      params, weights)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            list(ex.map(run, bounds))
    else:
        for b in bounds:
            run(b)
    return out


def argmax_list(scores: np.ndarray, perms: np.ndarray | None = None):
    """``(best_index, best_permutation, best_score)``; ties go to the lowest index."""
    scores = np.asarray(scores)
    if scores.size == 0:
        raise InputError("no scores to choose from")
    best = int(np.argmax(scores))
    perm = None if perms is None else np.asarray(perms[best]).tolist()
    return best, perm, float(scores[best])


@dataclass
class RerankResult:
    best_index: int
    best_permutation: list[int]
    best_items: list[int]
    best_score: float
    telemetry: dict


def rerank(request: RawRequest, params: ModelParams, weights=None, index: IndexMatrix | None = None,
           chunk_size: int | None = None, workers: int | None = None) -> RerankResult:
    """Encode, cache, score every permutation and return the best list."""
    cfg = params.config
    start = COUNTERS.snapshot()
    COUNTERS.timings = {}
    with timed("irm"):
        X_s = semantic_encode(request, params)
    with timed("build_cache"):
        cache = build_cache(X_s, params)
    if index is None:
        with timed("index"):
            index = build_index_matrix(X_s.shape[0], cfg.m, cache.layout, cfg.max_permutations)
    with timed("score"):
        scores = score_all_permutations(cache, index, params, weights, chunk_size or cfg.chunk_size,
                                        workers or cfg.workers)
    with timed("argmax"):
        best, perm, score = argmax_list(scores, index.perms)
    end = COUNTERS.snapshot()
    telemetry = {k: end[k] - start[k] for k in end}
    telemetry["timings_s"] = dict(COUNTERS.timings)
    telemetry["permutations"] = index.P
    items = [request.candidate_item_ids[i] for i in perm]
    return RerankResult(best, perm, items, score, telemetry)
