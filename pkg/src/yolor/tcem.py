"""Tree-based context extraction.

A length-m list is halved recursively down to blocks of two items. Every
block is encoded by set attention (self-attention with no position signal,
mean-pooled to one D-vector), so a block's embedding depends only on which
items it holds. Position t's context is the stack of the embeddings of the
blocks containing t, one per level, and its pCTR is
``sigmoid(FC(E_p[t] || x_s[t] || context_t))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config, ConfigError
from .errors import InputError
from .instrument import COUNTERS
from .kernel import affine_backward, affine_forward, sigmoid, sigmoid_backward, softmax_backward, softmax_rows
from .params import ModelParams


@dataclass(frozen=True)
class TreeLayout:
    """Blocks per level as 0-based half-open ``(start, stop)`` position ranges."""
    m: int
    levels: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def block_sizes(self) -> tuple[int, ...]:
        return tuple(lvl[0][1] - lvl[0][0] for lvl in self.levels)

    @property
    def block_count(self) -> int:
        return sum(len(lvl) for lvl in self.levels)

    def block_of(self, t: int, level: int) -> tuple[int, int]:
        """Block containing 0-based position ``t`` at 1-based ``level``."""
        size = self.block_sizes[level - 1]
        start = (t // size) * size
        return start, start + size

    def shared_levels(self, t: int, s: int) -> int:
        return sum(1 for k in range(1, self.depth + 1) if self.block_of(t, k) == self.block_of(s, k))


def tree_blocks(m: int) -> TreeLayout:
    if m < 2 or m & (m - 1):
        raise ConfigError(f"list length m={m} must be a power of two >= 2")
    levels = []
    size = m
    while size >= 2:
        levels.append(tuple((s, s + size) for s in range(0, m, size)))
        size //= 2
    return TreeLayout(m, tuple(levels))


def context_layout(config: Config) -> TreeLayout:
    """The tree, or a single whole-list block when the tree is ablated."""
    if config.no_tcem:
        return TreeLayout(config.m, (((0, config.m),),))
    return tree_blocks(config.m)


# ------------------------------------------------------------ set attention

def set_attention_forward(rows: np.ndarray, params: ModelParams, level: int = 1):
    """Encode G sets at once: ``rows`` (G, k, D) -> (G, D)."""
    G, k, D = rows.shape
    if k == 0:
        raise InputError("set attention needs at least one row")
    wq, wk, wv = params.sa_names(level)
    q, cq = affine_forward(rows, params[wq])
    kk, ck = affine_forward(rows, params[wk])
    v, cv = affine_forward(rows, params[wv])
    scale = 1.0 / math.sqrt(D)
    a = softmax_rows((q @ kk.transpose(0, 2, 1)) * scale)
    o = a @ v
    COUNTERS.add("set_attention", G)
    return o.mean(axis=1), (cq, ck, cv, q, kk, v, a, scale, k)


def set_attention_backward(de: np.ndarray, cache) -> np.ndarray:
    cq, ck, cv, q, kk, v, a, scale, k = cache
    do = np.repeat(de[:, None, :] / k, k, axis=1)
    da = do @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ do
    ds = softmax_backward(da, a) * scale
    dq = ds @ kk
    dk = ds.transpose(0, 2, 1) @ q
    return affine_backward(dq, cq) + affine_backward(dk, ck) + affine_backward(dv, cv)


def set_attention(rows: np.ndarray, params: ModelParams, item_ids=None, level: int = 1) -> np.ndarray:
    """Encode one set of k rows into a D-vector.

    When ``item_ids`` is given the rows are first put in ascending id order,
    which makes the result bit-identical for every input ordering.
    """
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InputError(f"set attention needs a non-empty k x D matrix, got shape {rows.shape}")
    if item_ids is not None:
        rows = rows[np.argsort(np.asarray(item_ids), kind="stable")]
    return set_attention_forward(rows[None], params, level)[0][0]


# ------------------------------------------------------------ per-list context

def _check_permutation(permutation, n: int) -> np.ndarray:
    perm = np.asarray(permutation, dtype=np.int64)
    if len(set(perm.tolist())) != len(perm):
        raise InputError(f"duplicate item in permutation {perm.tolist()}")
    if perm.min(initial=0) < 0 or perm.max(initial=0) >= n:
        raise InputError(f"permutation {perm.tolist()} references items outside 0..{n - 1}")
    return perm


def context_stack_for_list(permutation, X_s: np.ndarray, params: ModelParams) -> np.ndarray:
    """m x (L*D) context stack of one ordered list, recomputing every block."""
    cfg = params.config
    perm = _check_permutation(permutation, X_s.shape[0])
    layout = context_layout(cfg)
    if len(perm) != layout.m:
        raise InputError(f"permutation length {len(perm)} != m={layout.m}")
    D = X_s.shape[1]
    stack = np.zeros((layout.m, layout.depth * D), dtype=X_s.dtype)
    for k, blocks in enumerate(layout.levels, start=1):
        for start, stop in blocks:
            items = perm[start:stop]
            e = set_attention(X_s[items], params, item_ids=items, level=k)
            stack[start:stop, (k - 1) * D:k * D] = e
    return stack


# ------------------------------------------------------------ head

def head_forward(pos: np.ndarray, x_s: np.ndarray, ctx: np.ndarray, params: ModelParams):
    """pCTR for aligned (..., D), (..., D), (..., L*D) inputs -> (...)."""
    h = np.concatenate([np.broadcast_to(pos, x_s.shape), x_s, ctx], axis=-1)
    z, c = affine_forward(h, params["head_w"], params["head_b"])
    y = sigmoid(z[..., 0])
    COUNTERS.add("head_evals", y.size)
    return y, (c, y, x_s.shape[-1])


def head_backward(dy: np.ndarray, cache):
    """Returns gradients for (pos, x_s, ctx), pos not yet reduced over batch."""
    c, y, D = cache
    dz = sigmoid_backward(dy, y)[..., None]
    dh = affine_backward(dz, c)
    return dh[..., :D], dh[..., D:2 * D], dh[..., 2 * D:]


def predict_item_pctr(t: int, E_p: np.ndarray, x_s_t: np.ndarray, X_C_t: np.ndarray,
                      params: ModelParams) -> float:
    """pCTR of the item at 1-based position ``t``."""
    if not 1 <= t <= E_p.shape[0]:
        raise InputError(f"position {t} outside 1..{E_p.shape[0]}")
    y, _ = head_forward(E_p[t - 1], np.asarray(x_s_t), np.asarray(X_C_t), params)
    return float(y)


def score_list(permutation, X_s: np.ndarray, params: ModelParams, weights=None):
    """Per-position pCTRs and their (optionally weighted) sum for one list."""
    perm = _check_permutation(permutation, X_s.shape[0])
    stack = context_stack_for_list(perm, X_s, params)
    E_p = params["pos_emb"].value.astype(X_s.dtype, copy=False)
    per_item, _ = head_forward(E_p, X_s[perm], stack, params)
    w = np.ones(len(perm)) if weights is None else np.asarray(weights, dtype=np.float64)
    return per_item, float(np.dot(w, per_item))


def context_stacks(perms: np.ndarray, X_s: np.ndarray, params: ModelParams) -> np.ndarray:
    """Batched, uncached context stacks: (C, m) item indices -> (C, m, L*D).

    Each block's rows are put in ascending item order before encoding, as in
    ``set_attention``.
    """
    layout = context_layout(params.config)
    C, m = perms.shape
    D = X_s.shape[1]
    out = np.empty((C, m, layout.depth, D), dtype=X_s.dtype)
    for k, blocks in enumerate(layout.levels, start=1):
        b = layout.block_sizes[k - 1]
        nb = len(blocks)
        items = np.sort(perms.reshape(C, nb, b), axis=-1)
        e, _ = set_attention_forward(X_s[items.reshape(C * nb, b)], params, k)
        out[:, :, k - 1, :] = np.repeat(e.reshape(C, nb, D), b, axis=1)
    return out.reshape(C, m, layout.depth * D)


def score_lists(perms: np.ndarray, X_s: np.ndarray, params: ModelParams, weights=None,
                chunk_size: int = 4096) -> np.ndarray:
    """Scores of many ordered lists, recomputing every block of every list."""
    perms = np.asarray(perms)
    E_p = params["pos_emb"].value.astype(X_s.dtype, copy=False)
    out = np.empty(perms.shape[0], dtype=X_s.dtype)
    for s in range(0, perms.shape[0], chunk_size):
        p = perms[s:s + chunk_size]
        y, _ = head_forward(E_p, X_s[p], context_stacks(p, X_s, params), params)
        out[s:s + len(p)] = y.sum(axis=1) if weights is None else y @ np.asarray(weights, dtype=y.dtype)
    return out
