"""Learnable weights of the whole model, grouped by name."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import Config
from .kernel import ParamTensor, load_tensors, save_tensors


class ModelParams(dict):
    """``name -> ParamTensor`` with the config that shaped it.

    Embedding tables carry one extra trailing row used for out-of-vocabulary ids.
    """

    def __init__(self, config: Config, tensors: dict[str, ParamTensor] | None = None):
        super().__init__(tensors or {})
        self.config = config

    @property
    def dtype(self):
        return next(iter(self.values())).value.dtype

    def zero_grad(self) -> None:
        for p in self.values():
            p.zero_grad()

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: p.astype(dtype) for k, p in self.items()})

    def sa_names(self, level: int) -> tuple[str, str, str]:
        """Set-attention projection names used at tree level ``level`` (1-based)."""
        prefix = f"sa{level}" if self.config.per_level_set_attention else "sa"
        return f"{prefix}_wq", f"{prefix}_wk", f"{prefix}_wv"

    def values_dict(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.items()}

    def save(self, path: str | Path) -> None:
        save_tensors(path, self.values_dict(), meta={"config": self.config.to_dict()})

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        tensors, meta = load_tensors(path)
        config = Config.from_dict(meta["config"])
        return cls(config, {k: ParamTensor(v) for k, v in tensors.items()})


def context_width(config: Config) -> int:
    """Number of D-wide context slots the head sees per position."""
    return 1 if config.no_tcem else config.levels


def mlp_input_dim(config: Config) -> int:
    parts = 4 if config.include_item_embedding else 3
    return parts * config.D + config.dense_dim


def init_params(config: Config, rng: np.random.Generator | int | None = None,
                dtype=np.float32) -> ModelParams:
    config.validate()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(config.seed if rng is None else rng)
    D, std = config.D, config.init_std

    def normal(*shape):
        return ParamTensor.normal(shape, rng, std, dtype)

    p = {
        "emb_user": normal(config.user_vocab + 1, D),
        "emb_ctx": normal(config.context_vocab + 1, D),
        "emb_item": normal(config.item_vocab + 1, D),
        "ta_wq": normal(D, D),
        "ta_wk": normal(D, D),
        "ta_wv": normal(D, D),
        "ta_wo": normal(D, D),
    }
    sizes = (mlp_input_dim(config), *config.hidden, D)
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        p[f"mlp_w{i}"] = normal(a, b)
        p[f"mlp_b{i}"] = ParamTensor.zeros((1, b), dtype)
    levels = 1 if config.no_tcem else config.levels
    prefixes = [f"sa{k}" for k in range(1, levels + 1)] if config.per_level_set_attention else ["sa"]
    for pre in prefixes:
        for w in ("wq", "wk", "wv"):
            p[f"{pre}_{w}"] = normal(D, D)
    p["pos_emb"] = normal(config.m, D)
    p["head_w"] = normal((2 + context_width(config)) * D, 1)
    p["head_b"] = ParamTensor.zeros((1, 1), dtype)
    return ModelParams(config, p)


def mlp_layer_count(params: ModelParams) -> int:
    return sum(1 for k in params if k.startswith("mlp_w"))
