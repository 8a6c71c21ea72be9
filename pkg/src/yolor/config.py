"""Run configuration: one flat dataclass, JSON on disk, ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

CONFIG_VERSION = 1
ABLATIONS = ("irm", "tcem", "gbpr")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # model shape
    D: int = 8
    m: int = 8
    n: int = 8
    hidden: tuple[int, ...] = (1024, 256, 128)
    user_vocab: int = 1000
    context_vocab: int = 16
    item_vocab: int = 500
    dense_dim: int = 0
    oov: bool = True
    # concatenate the candidate's own embedding into the feature-cross input
    include_item_embedding: bool = True
    per_level_set_attention: bool = False
    ablate: tuple[str, ...] = ()
    # training
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.05
    dropout: float = 0.1
    batch_size: int = 1024
    epochs: int = 5
    init_std: float = 0.01
    seed: int = 0
    # inference
    chunk_size: int = 4096
    max_permutations: int = 5_000_000
    workers: int = 1

    def __post_init__(self) -> None:
        self.hidden = tuple(int(h) for h in self.hidden)
        self.ablate = tuple(sorted(set(self.ablate)))

    @property
    def levels(self) -> int:
        return self.m.bit_length() - 1

    @property
    def no_irm(self) -> bool:
        return "irm" in self.ablate

    @property
    def no_tcem(self) -> bool:
        return "tcem" in self.ablate

    @property
    def effective_alpha(self) -> float:
        return 0.0 if "gbpr" in self.ablate else self.alpha

    def validate(self) -> "Config":
        if self.m < 2 or self.m & (self.m - 1):
            raise ConfigError(f"m={self.m} must be a power of two >= 2")
        if self.n < self.m:
            raise ConfigError(f"n={self.n} must be >= m={self.m}")
        if self.D < 1:
            raise ConfigError("D must be positive")
        unknown = set(self.ablate) - set(ABLATIONS)
        if unknown:
            raise ConfigError(f"unknown ablation(s) {sorted(unknown)}; choose from {ABLATIONS}")
        if self.no_tcem and self.per_level_set_attention:
            raise ConfigError("ablate=tcem has a single attention block; per_level_set_attention conflicts")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        return self

    # ------------------------------------------------------------ io

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["ablate"] = list(self.ablate)
        return {"config_version": CONFIG_VERSION, **d}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:12]

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        d = dict(d)
        version = d.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config_version {version}")
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - names
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path: str | Path) -> "Config":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def override(self, **kv) -> "Config":
        return Config.from_dict({**self.to_dict(), **kv})

    def apply_overrides(self, pairs: list[str]) -> "Config":
        """Apply ``key=value`` strings; values are parsed as JSON when possible."""
        kv = {}
        types = {f.name: f.type for f in dataclasses.fields(self)}
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, raw = pair.split("=", 1)
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            if key in ("hidden", "ablate") and isinstance(val, str):
                val = [v for v in val.split(",") if v]
                if key == "hidden":
                    val = [int(v) for v in val]
            kv[key] = val
        return self.override(**kv)


def derive_seed(seed: int, *tags) -> int:
    h = hashlib.sha256(repr((seed,) + tags).encode()).digest()
    return int.from_bytes(h[:8], "little")
