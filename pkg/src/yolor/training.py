"""Supervised training on exposed lists: cross-entropy + intra-list BPR.

Training scores each list only in the order it was shown (labels exist for
nothing else); the cached permutation search is an inference-time concern.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .config import ABLATIONS, Config, ConfigError
from .data import ListSample
from .irm import RequestBatch, collate, encode_backward, encode_batch
from .kernel import adam_step
from .params import ModelParams, init_params
from .tcem import context_layout, head_backward, head_forward, set_attention_backward, set_attention_forward

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass
class LossReport:
    ce: float
    gbpr: float
    total: float
    pair_count: int

    def as_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------ losses

def _ce_batch(preds: np.ndarray, labels: np.ndarray):
    """Per-list cross-entropy (B,) and its gradient w.r.t. preds (B, m)."""
    m = preds.shape[1]
    p = np.clip(preds.astype(np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = labels.astype(np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum(axis=1) / m
    inside = (preds > PROB_CLAMP) & (preds < 1.0 - PROB_CLAMP)
    grad = -(y / p - (1.0 - y) / (1.0 - p)) / m * inside
    return loss, grad


def _gbpr_batch(preds: np.ndarray, labels: np.ndarray):
    """Per-list pairwise loss (B,), pair counts (B,) and gradient (B, m)."""
    p = preds.astype(np.float64)
    y = labels.astype(bool)
    pairs = y[:, :, None] & ~y[:, None, :]  # [b, i, j]: i clicked, j not
    count = pairs.sum(axis=(1, 2))
    diff = p[:, :, None] - p[:, None, :]
    term = np.logaddexp(0.0, -diff)  # -log sigmoid(diff)
    denom = np.maximum(count, 1)[:, None, None]
    loss = (term * pairs).sum(axis=(1, 2)) / denom[:, 0, 0]
    # d(-log sigmoid(d))/dd = -sigmoid(-d)
    g = -np.exp(-np.logaddexp(0.0, diff)) * pairs / denom
    grad = g.sum(axis=2) - g.sum(axis=1)
    return loss, count, grad


def ce_loss(preds, labels) -> float:
    loss, _ = _ce_batch(np.asarray(preds, dtype=np.float64)[None], np.asarray(labels)[None])
    return float(loss[0])


def gbpr_loss(preds, labels) -> tuple[float, int]:
    loss, count, _ = _gbpr_batch(np.asarray(preds, dtype=np.float64)[None], np.asarray(labels)[None])
    return float(loss[0]), int(count[0])


def batch_loss(preds: np.ndarray, labels: np.ndarray, alpha: float):
    """Batch-mean ``ce + alpha * gbpr`` and its gradient w.r.t. ``preds``."""
    B = preds.shape[0]
    ce, dce = _ce_batch(preds, labels)
    gb, count, dgb = _gbpr_batch(preds, labels)
    report = LossReport(float(ce.mean()), float(gb.mean()), float(ce.mean() + alpha * gb.mean()), int(count.sum()))
    return report, (dce + alpha * dgb) / B


# ------------------------------------------------------------ dropout

def dropout_mask(shape, rate: float, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def context_dropout(stack: np.ndarray, rate: float, rng: np.random.Generator | None = None,
                    training: bool = True) -> np.ndarray:
    """Inverted dropout of whole context sub-vectors.

    ``stack`` has shape (..., L, D); each of the L sub-vectors of each
    position is zeroed independently.
    """
    if not training or rate == 0.0:
        return stack
    if rng is None:
        raise ValueError("context dropout in training mode needs an rng")
    mask = dropout_mask(stack.shape[:-1] + (1,), rate, rng, stack.dtype)
    return stack * mask


# ------------------------------------------------------------ model

def forward(batch: RequestBatch, params: ModelParams, dropout: float = 0.0,
            rng: np.random.Generator | None = None):
    """Per-item pCTR (B, m) for lists in their displayed order."""
    cfg = params.config
    X_s, enc_cache = encode_batch(batch, params)
    B, m, D = X_s.shape
    if m != cfg.m:
        raise ConfigError(f"batch lists have length {m}, model expects m={cfg.m}")
    layout = context_layout(cfg)
    ctx = np.empty((B, m, layout.depth, D), dtype=X_s.dtype)
    sa_caches = []
    for k, blocks in enumerate(layout.levels, start=1):
        b = layout.block_sizes[k - 1]
        nb = len(blocks)
        # block rows already in ascending candidate order: candidates are indexed by display position
        e, c = set_attention_forward(X_s.reshape(B * nb, b, D), params, k)
        ctx[:, :, k - 1, :] = np.repeat(e.reshape(B, nb, D), b, axis=1)
        sa_caches.append(c)
    mask = None
    if dropout > 0.0:
        mask = dropout_mask((B, m, layout.depth, 1), dropout, rng, ctx.dtype)
        ctx = ctx * mask
    E_p = params["pos_emb"].value
    y, head_cache = head_forward(E_p, X_s, ctx.reshape(B, m, -1), params)
    return y, (batch, enc_cache, sa_caches, mask, head_cache, layout, X_s.shape)


def backward(dy: np.ndarray, cache, params: ModelParams) -> None:
    batch, enc_cache, sa_caches, mask, head_cache, layout, (B, m, D) = cache
    d_pos, dXs, dctx = head_backward(dy, head_cache)
    params["pos_emb"].grad += d_pos.sum(axis=0)
    dXs = dXs.copy()
    dctx = dctx.reshape(B, m, layout.depth, D)
    if mask is not None:
        dctx = dctx * mask
    for k, c in enumerate(sa_caches, start=1):
        b = layout.block_sizes[k - 1]
        nb = m // b
        de = dctx[:, :, k - 1, :].reshape(B, nb, b, D).sum(axis=2).reshape(B * nb, D)
        dXs += set_attention_backward(de, c).reshape(B, m, D)
    encode_backward(dXs, batch, params, enc_cache)


def loss_and_grad(batch: RequestBatch, labels: np.ndarray, params: ModelParams, alpha: float,
                  dropout: float = 0.0, rng: np.random.Generator | None = None) -> LossReport:
    params.zero_grad()
    y, cache = forward(batch, params, dropout, rng)
    report, dy = batch_loss(y, labels, alpha)
    backward(dy.astype(y.dtype), cache, params)
    return report


# ------------------------------------------------------------ data plumbing

def to_batch(samples: list[ListSample], config: Config) -> tuple[RequestBatch, np.ndarray]:
    batch = collate([s.request for s in samples], config)
    labels = np.array([s.labels for s in samples], dtype=np.int8).reshape(len(samples), config.m)
    return batch, labels


def usable_samples(samples, config: Config) -> tuple[list[ListSample], int]:
    kept, skipped = [], 0
    for s in samples:
        if len(s.labels) != config.m or s.request.n != config.m:
            skipped += 1
            continue
        kept.append(s)
    if skipped:
        log.warning("skipped %d samples whose list length differs from m=%d", skipped, config.m)
    return kept, skipped


def ablation_variant(config: Config, *flags: str) -> Config:
    """Config with the named components removed (``irm``, ``tcem``, ``gbpr``)."""
    flags = tuple(flags)
    unknown = set(flags) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation flag(s) {sorted(unknown)}")
    if len(set(flags)) != len(flags):
        raise ConfigError(f"ablation flags repeated: {flags}")
    return config.override(ablate=sorted(set(config.ablate) | set(flags)))


def train(samples, config: Config, params: ModelParams | None = None, on_epoch=None):
    """Fit all parameters; returns ``(params, [LossReport per epoch])``.

    ``on_epoch(epoch, report)`` is called after every epoch when given.
    """
    config.validate()
    samples, _ = usable_samples(list(samples), config)
    if not samples:
        raise ValueError("no usable training samples")
    rng = np.random.default_rng(config.seed)
    if params is None:
        params = init_params(config, rng)
    batch, labels = to_batch(samples, config)
    alpha = config.effective_alpha
    N = labels.shape[0]
    reports = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        sums = np.zeros(3)
        pairs = 0
        for s in range(0, N, config.batch_size):
            idx = order[s:s + config.batch_size]
            rep = loss_and_grad(batch.take(idx), labels[idx], params, alpha, config.dropout, rng)
            adam_step(params.values(), config.lr, config.beta1, config.beta2, config.adam_eps)
            sums += len(idx) * np.array([rep.ce, rep.gbpr, rep.total])
            pairs += rep.pair_count
        ce, gb, tot = sums / N
        report = LossReport(float(ce), float(gb), float(tot), pairs)
        reports.append(report)
        log.info("epoch %d: ce=%.5f gbpr=%.5f total=%.5f", epoch, ce, gb, tot)
        if on_epoch is not None:
            on_epoch(epoch, report)
    return params, reports


def predict(samples: list[ListSample], config: Config, params: ModelParams, batch_size: int = 4096) -> np.ndarray:
    """Per-item pCTR (N, m) in displayed order, inference mode."""
    outs = []
    for s in range(0, len(samples), batch_size):
        batch, _ = to_batch(samples[s:s + batch_size], config)
        y, _ = forward(batch, params)
        outs.append(y)
    return np.concatenate(outs) if outs else np.zeros((0, config.m))
