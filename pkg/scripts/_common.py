"""Shared setup for the experiment scripts: the seeded synthetic dataset."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from yolor.config import Config
from yolor.data import SyntheticWorld, filter_lists, generate


def dataset(seed: int = 0, num_train: int = 50_000, num_test: int = 5_000, m: int = 8):
    world = SyntheticWorld.create(seed)
    train = list(filter_lists(generate(world, num_train, m, m, seed=seed + 1, truth_limit=0, id_prefix="t").samples))
    test = list(filter_lists(generate(world, num_test, m, m, seed=seed + 2, truth_limit=0, id_prefix="e").samples))
    return world, train, test


def base_config(world: SyntheticWorld, **kw) -> Config:
    return Config(user_vocab=world.num_users, item_vocab=world.num_items, context_vocab=world.num_contexts,
                  **kw).validate()


def labels_of(samples) -> np.ndarray:
    return np.array([s.labels for s in samples])


def write_rows(out: Path, name: str, rows: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    (out / f"{name}.json").write_text(json.dumps(rows, indent=2) + "\n")
    for r in rows:
        print("  ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
