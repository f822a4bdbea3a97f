"""Corpus files and in-memory batches."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .nn import read_features
from .vocab import IngredientVocabulary, WordVocabulary, tokenize_instructions


def read_jsonl(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_jsonl(path, rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def recipe_segments(record: dict) -> list[str]:
    """Title first, then the instructions."""
    return [record.get("title", "")] + list(record.get("instructions", []))


@dataclass
class RecipeDataset:
    ids: list[str]
    features: np.ndarray  # (n, P, d)
    ingredients: list[list[int]]  # listing order
    tokens: list[list[int]]

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx: Sequence[int]) -> "RecipeDataset":
        idx = list(idx)
        return RecipeDataset([self.ids[i] for i in idx], self.features[idx],
                             [self.ingredients[i] for i in idx], [self.tokens[i] for i in idx])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator["RecipeDataset"]:
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self.subset(order[start:start + batch_size])


def load_dataset(records: Sequence[dict], ingr_vocab: IngredientVocabulary, word_vocab: WordVocabulary,
                 base_dir=None, features: dict[str, np.ndarray] | None = None,
                 max_len: int | None = None, max_ingredients: int | None = None) -> RecipeDataset:
    """Map records to vocabulary ids; samples left with no known ingredient are dropped."""
    ids, feats, ingrs, toks = [], [], [], []
    for r in records:
        ingr = ingr_vocab.ids_for(r["ingredients"])
        if not ingr:
            continue
        if max_ingredients is not None:
            ingr = ingr[:max_ingredients]
        if features is not None:
            f = features[r["id"]]
        else:
            f = read_features(Path(base_dir or ".") / r["image"])
        ids.append(r["id"])
        feats.append(f)
        ingrs.append(ingr)
        toks.append(tokenize_instructions(recipe_segments(r), word_vocab, max_len))
    if not ids:
        raise ValueError("no usable samples")
    return RecipeDataset(ids, np.stack(feats), ingrs, toks)
