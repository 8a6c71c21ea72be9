"""Item-level representation: raw request features -> one semantic row per candidate.

Per candidate i: ``x'_i`` = target attention of the candidate embedding over
the behaviour sequence, then a ReLU feature-cross MLP over
``x'_i || X_i || e_u || e_c || dense_i`` projects to D. Candidates never
interact here, so the cost is linear in n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .instrument import COUNTERS
from .kernel import affine_backward, affine_forward, relu_backward, relu_forward, softmax_backward, softmax_rows
from .params import ModelParams, mlp_layer_count


@dataclass
class RawRequest:
    user_profile_ids: list[int]
    context_ids: list[int]
    behavior_item_ids: list[int]
    candidate_item_ids: list[int]
    candidate_dense: np.ndarray | None = None
    request_id: str = ""

    @property
    def n(self) -> int:
        return len(self.candidate_item_ids)


@dataclass
class RequestBatch:
    """Padded arrays for B requests with the same candidate count."""
    user_ids: np.ndarray
    user_mask: np.ndarray
    ctx_ids: np.ndarray
    ctx_mask: np.ndarray
    beh_ids: np.ndarray
    beh_mask: np.ndarray
    item_ids: np.ndarray
    dense: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.item_ids.shape[0]

    def take(self, idx) -> "RequestBatch":
        return RequestBatch(self.user_ids[idx], self.user_mask[idx], self.ctx_ids[idx], self.ctx_mask[idx],
                            self.beh_ids[idx], self.beh_mask[idx], self.item_ids[idx],
                            None if self.dense is None else self.dense[idx])


def map_ids(ids, vocab: int, oov: bool, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        if not oov:
            raise InputError(f"{what} id {int(ids[bad][0])} outside vocabulary of size {vocab}")
        ids = np.where(bad, vocab, ids)
    return ids


def _pad(rows: list[list[int]], vocab: int, oov: bool, what: str):
    width = max((len(r) for r in rows), default=0)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = map_ids(r, vocab, oov, what)
        mask[i, :len(r)] = True
    return ids, mask


def collate(requests: list[RawRequest], config) -> RequestBatch:
    n = {r.n for r in requests}
    if len(n) != 1:
        raise InputError(f"requests in one batch must share candidate count, got {sorted(n)}")
    u, um = _pad([r.user_profile_ids for r in requests], config.user_vocab, config.oov, "user")
    c, cm = _pad([r.context_ids for r in requests], config.context_vocab, config.oov, "context")
    b, bm = _pad([r.behavior_item_ids for r in requests], config.item_vocab, config.oov, "behaviour item")
    items = np.stack([map_ids(r.candidate_item_ids, config.item_vocab, config.oov, "item") for r in requests])
    dense = None
    if config.dense_dim:
        dense = np.zeros((len(requests), items.shape[1], config.dense_dim))
        for i, r in enumerate(requests):
            if r.candidate_dense is not None:
                dense[i] = np.asarray(r.candidate_dense).reshape(items.shape[1], config.dense_dim)
    return RequestBatch(u, um, c, cm, b, bm, items, dense)


# ------------------------------------------------------------ embeddings

def _mean_pool(table: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> np.ndarray:
    rows = table[ids] * mask[..., None]
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    return (rows.sum(axis=1) / count).astype(table.dtype)


def _mean_pool_backward(grad: np.ndarray, de: np.ndarray, ids: np.ndarray, mask: np.ndarray) -> None:
    count = np.maximum(mask.sum(axis=1, keepdims=True), 1)
    drows = (de / count)[:, None, :] * mask[..., None]
    np.add.at(grad, ids[mask], drows[mask])


def embed_lookup(request: RawRequest, params: ModelParams):
    """Return ``(e_u, e_c, E_b, X)`` for one request.

    Multi-valued fields are mean-pooled; an empty behaviour sequence gives a
    0 x D ``E_b``.
    """
    batch = collate([request], params.config)
    e_u = _mean_pool(params["emb_user"].value, batch.user_ids, batch.user_mask)[0]
    e_c = _mean_pool(params["emb_ctx"].value, batch.ctx_ids, batch.ctx_mask)[0]
    E_b = params["emb_item"].value[batch.beh_ids[0][batch.beh_mask[0]]]
    X = params["emb_item"].value[batch.item_ids[0]]
    return e_u, e_c, E_b, X


# ------------------------------------------------------------ target attention

def target_attention_forward(X: np.ndarray, E_b: np.ndarray, beh_mask: np.ndarray, params: ModelParams):
    """Batched attention of each candidate (B, n, D) over its behaviours (B, Nb, D)."""
    B, n, D = X.shape
    if E_b.shape[1] == 0:
        return np.zeros_like(X), None
    q, cq = affine_forward(X, params["ta_wq"])
    k, ck = affine_forward(E_b, params["ta_wk"])
    v, cv = affine_forward(E_b, params["ta_wv"])
    scale = 1.0 / math.sqrt(D)
    s = (q @ k.transpose(0, 2, 1)) * scale
    a = softmax_rows(s, mask=beh_mask[:, None, :])
    o = a @ v
    out, co = affine_forward(o, params["ta_wo"])
    return out, (cq, ck, cv, co, q, k, v, a, scale)


def target_attention_backward(dout: np.ndarray, cache):
    """Returns (dX, dE_b); None cache means the empty-sequence zero output."""
    if cache is None:
        return np.zeros_like(dout), None
    cq, ck, cv, co, q, k, v, a, scale = cache
    do = affine_backward(dout, co)
    da = do @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ do
    ds = softmax_backward(da, a) * scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dX = affine_backward(dq, cq)
    dEb = affine_backward(dk, ck) + affine_backward(dv, cv)
    return dX, dEb


def target_attention(X_i: np.ndarray, E_b: np.ndarray, params: ModelParams) -> np.ndarray:
    """Single-candidate form: ``X_i`` (D,), ``E_b`` (N_b, D) -> (D,)."""
    X_i = np.asarray(X_i)[None, None, :]
    E_b = np.asarray(E_b, dtype=X_i.dtype).reshape(1, -1, X_i.shape[-1])
    out, _ = target_attention_forward(X_i, E_b, np.ones(E_b.shape[:2], dtype=bool), params)
    return out[0, 0]


# ------------------------------------------------------------ full encoder

def encode_batch(batch: RequestBatch, params: ModelParams):
    """Semantic matrices for a batch: returns ``(X_s (B, n, D), cache)``."""
    cfg = params.config
    dtype = params.dtype
    table = params["emb_item"].value
    X = table[batch.item_ids]
    B, n, D = X.shape
    if cfg.no_irm:
        return X, ("raw",)

    e_u = _mean_pool(params["emb_user"].value, batch.user_ids, batch.user_mask)
    e_c = _mean_pool(params["emb_ctx"].value, batch.ctx_ids, batch.ctx_mask)
    E_b = table[batch.beh_ids]
    x_att, ta_cache = target_attention_forward(X, E_b, batch.beh_mask, params)

    parts = [x_att]
    if cfg.include_item_embedding:
        parts.append(X)
    parts += [np.broadcast_to(e_u[:, None, :], (B, n, D)), np.broadcast_to(e_c[:, None, :], (B, n, D))]
    if cfg.dense_dim:
        parts.append(batch.dense.astype(dtype))
    h = np.concatenate(parts, axis=-1)

    COUNTERS.add("feature_cross_rows", B * n)
    layers = mlp_layer_count(params)
    caches = []
    for i in range(layers):
        h, c = affine_forward(h, params[f"mlp_w{i}"], params[f"mlp_b{i}"])
        r = None
        if i < layers - 1:
            h, r = relu_forward(h)
        caches.append((c, r))
    return h, ("full", ta_cache, caches)


def encode_backward(dXs: np.ndarray, batch: RequestBatch, params: ModelParams, cache) -> None:
    cfg = params.config
    item_grad = params["emb_item"].grad
    if cache[0] == "raw":
        np.add.at(item_grad, batch.item_ids.reshape(-1), dXs.reshape(-1, dXs.shape[-1]))
        return
    _, ta_cache, caches = cache
    dh = dXs
    for c, r in reversed(caches):
        if r is not None:
            dh = relu_backward(dh, r)
        dh = affine_backward(dh, c)
    D = cfg.D
    off = 0
    dx_att = dh[..., off:off + D]
    off += D
    dX = np.zeros_like(dx_att)
    if cfg.include_item_embedding:
        dX = dX + dh[..., off:off + D]
        off += D
    de_u = dh[..., off:off + D].sum(axis=1)
    de_c = dh[..., off + D:off + 2 * D].sum(axis=1)

    dX_ta, dEb = target_attention_backward(dx_att, ta_cache)
    dX = dX + dX_ta
    np.add.at(item_grad, batch.item_ids.reshape(-1), dX.reshape(-1, D))
    if dEb is not None:
        m = batch.beh_mask
        np.add.at(item_grad, batch.beh_ids[m], dEb[m])
    _mean_pool_backward(params["emb_user"].grad, de_u, batch.user_ids, batch.user_mask)
    _mean_pool_backward(params["emb_ctx"].grad, de_c, batch.ctx_ids, batch.ctx_mask)


def semantic_encode(request: RawRequest, params: ModelParams) -> np.ndarray:
    """n x D semantic matrix for one request."""
    X_s, _ = encode_batch(collate([request], params.config), params)
    return X_s[0]
