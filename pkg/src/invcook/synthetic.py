"""Seeded synthetic dishes: ingredient sets, feature "images" and templated instructions."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .nn import write_features

INGREDIENT_NAMES = (
    "salt", "pepper", "garlic", "onion", "flour", "sugar", "tomato", "basil", "butter", "egg",
    "milk", "olive oil", "soy sauce", "carrot", "potato", "rice", "honey", "lemon", "ginger",
    "cinnamon", "baking soda", "maple syrup", "sour cream", "spinach", "mushroom", "chicken",
    "beef", "shrimp", "yogurt", "lime juice", "almond", "celery", "cucumber", "parsley",
    "green bean", "sesame seed", "bay leaf", "red wine", "dijon mustard", "oregano",
)

# (verb, adjective, first step, combine verb, last step)
METHODS = (
    ("bake", "baked", "preheat the oven", "mix", "bake for 20 minutes"),
    ("fry", "fried", "heat the pan", "toss", "fry until golden"),
    ("boil", "boiled", "boil the water", "stir", "simmer until tender"),
    ("grill", "grilled", "light the grill", "brush", "grill for 10 minutes"),
)


@dataclass
class SyntheticSpec:
    n_samples: int = 2000
    n_ingredients: int = 30
    min_card: int = 2
    max_card: int = 8
    pairs: tuple = ((0, 1), (2, 3), (4, 5), (6, 7))
    pair_prob: float = 0.9
    n_positions: int = 16
    feature_dim: int = 64
    noise: float = 0.5
    coverage: float = 1.0  # fraction of positions each present ingredient occupies
    n_methods: int = 3
    method_scale: float = 1.0
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        self.pairs = tuple(tuple(int(x) for x in p) for p in self.pairs)
        self.split = tuple(float(x) for x in self.split)
        if not 1 <= self.n_ingredients <= len(INGREDIENT_NAMES):
            raise ValueError(f"n_ingredients must lie in [1, {len(INGREDIENT_NAMES)}]")
        if not 1 <= self.min_card <= self.max_card <= self.n_ingredients:
            raise ValueError("need 1 <= min_card <= max_card <= n_ingredients")
        if not 0 <= self.n_methods <= len(METHODS):
            raise ValueError(f"n_methods must lie in [0, {len(METHODS)}]")
        members = [x for p in self.pairs for x in p]
        if len(set(members)) != len(members) or any(x >= self.n_ingredients for x in members):
            raise ValueError("co-occurrence pairs must be disjoint ingredient ids")
        if not 0.0 < self.coverage <= 1.0:
            raise ValueError("coverage must lie in (0, 1]")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")

    @property
    def names(self) -> tuple[str, ...]:
        return INGREDIENT_NAMES[: self.n_ingredients]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**d)


def ingredient_directions(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 1])
    return rng.normal(size=(spec.n_ingredients, spec.feature_dim)) / np.sqrt(spec.feature_dim)


def method_directions(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 2])
    return rng.normal(size=(max(spec.n_methods, 1), spec.feature_dim)) / np.sqrt(spec.feature_dim)


def sample_set(spec: SyntheticSpec, rng: np.random.Generator) -> list[int]:
    """Random ingredient set; a drawn pair member brings its partner with ``pair_prob``."""
    k = int(rng.integers(spec.min_card, spec.max_card + 1))
    partner = {}
    for a, b in spec.pairs:
        partner[a], partner[b] = b, a
    chosen: set[int] = set()
    banned: set[int] = set()
    for x in rng.permutation(spec.n_ingredients):
        if len(chosen) >= k:
            break
        x = int(x)
        if x in chosen or x in banned:
            continue
        if x in partner:
            y = partner[x]
            if k - len(chosen) < 2:
                continue  # no room to decide the pair either way
            if rng.random() < spec.pair_prob:
                chosen.update((x, y))
                continue
            banned.add(y)
        chosen.add(x)
    return sorted(chosen)


def render_features(ingredients: Sequence[int], spec: SyntheticSpec, rng: np.random.Generator | None = None,
                    method: int | None = None, noise: float | None = None) -> np.ndarray:
    """(P, d) features: per-position sums of present-ingredient directions plus noise.

    With ``coverage`` below 1 each ingredient occupies a random subset of
    positions, so its evidence is local rather than spread over the whole map.
    """
    dirs = ingredient_directions(spec)
    p = spec.n_positions
    feats = np.zeros((p, spec.feature_dim))
    width = max(1, int(round(spec.coverage * p)))
    sigma = spec.noise if noise is None else noise
    if (width < p or sigma > 0) and rng is None:
        raise ValueError("random rendering needs an rng")
    for i in ingredients:
        if width == p:
            feats += dirs[i]
        else:
            feats[rng.choice(p, size=width, replace=False)] += dirs[i]
    if method is not None and spec.n_methods:
        feats += spec.method_scale * method_directions(spec)[method]
    if sigma > 0:
        feats = feats + sigma * rng.normal(size=feats.shape) / np.sqrt(spec.feature_dim)
    return feats.astype(np.float32)


def render_instructions(ingredients: Sequence[int], spec: SyntheticSpec,
                        method: int = 0) -> tuple[str, list[str]]:
    """Title plus instruction segments mentioning every ingredient exactly once, in id order."""
    names = [spec.names[i] for i in sorted(ingredients)]
    _, adj, first, combine, last = METHODS[method]
    title = f"{adj} {names[0]} dish" if names else f"{adj} dish"
    segments = [first]
    for i in range(0, len(names) - 1, 2):
        segments.append(f"{combine} the {names[i]} and the {names[i + 1]}")
    if len(names) % 2:
        segments.append(f"add the {names[-1]}")
    segments.append(last)
    return title, segments


def generate_samples(spec: SyntheticSpec) -> tuple[dict[str, list[dict]], dict[str, np.ndarray]]:
    """Records per split and a features array per sample id."""
    records, feats = [], {}
    for i in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, 3, i])
        ids = sample_set(spec, rng)
        method = int(rng.integers(spec.n_methods)) if spec.n_methods else 0
        sid = f"s{i:05d}"
        title, segments = render_instructions(ids, spec, method)
        records.append({"id": sid, "title": title, "ingredients": [spec.names[j] for j in ids],
                        "instructions": segments, "image": f"features/{sid}.icft"})
        feats[sid] = render_features(ids, spec, rng, method if spec.n_methods else None)
    order = np.random.default_rng([spec.seed, 4]).permutation(spec.n_samples)
    n_train = int(round(spec.split[0] * spec.n_samples))
    n_val = int(round(spec.split[1] * spec.n_samples))
    parts = {"train": order[:n_train], "val": order[n_train:n_train + n_val],
             "test": order[n_train + n_val:]}
    splits = {name: [records[j] for j in sorted(idx)] for name, idx in parts.items()}
    return splits, feats


def generate_dataset(spec: SyntheticSpec, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    splits, feats = generate_samples(spec)
    paths = {}
    for name, recs in splits.items():
        path = out / f"{name}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for r in recs:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        paths[name] = path
    for sid, arr in feats.items():
        write_features(out / "features" / f"{sid}.icft", arr)
    (out / "spec.json").write_text(spec.to_json() + "\n", encoding="utf-8")
    return paths
