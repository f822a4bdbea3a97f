"""Instruction decoder conditioned on image features and ingredient embeddings."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (Condition, ConfigError, DropoutRNG, Embedding, FusionStrategy, ImageEncoder,
                 Module, ModelConfig, TransformerDecoder)
from .tensor import Tensor
from .vocab import WordVocabulary, split_segments


class Variant(str, enum.Enum):
    FULL = "full"
    I2R = "i2r"  # image only
    L2R = "l2r"  # ingredients only


def ablation_variant(kind, strategy: FusionStrategy = FusionStrategy.CONCATENATED):
    """(strategy, uses_image, uses_ingredients) for a decoder wiring."""
    kind = Variant(kind)
    if kind is Variant.I2R:
        return FusionStrategy.SINGLE_CONDITION, True, False
    if kind is Variant.L2R:
        return FusionStrategy.SINGLE_CONDITION, False, True
    strategy = FusionStrategy(strategy)
    if strategy is FusionStrategy.SINGLE_CONDITION:
        raise ConfigError("the full model needs a two-source fusion strategy")
    return strategy, True, True


@dataclass
class GeneratedRecipe:
    title: list[int]
    instructions: list[list[int]]
    ingredients: list[int]
    image_id: str | None = None
    truncated: bool = False
    degenerate: bool = False
    tokens: list[int] = field(default_factory=list)

    @property
    def segment_count(self) -> int:
        return len(self.instructions) + (1 if self.title else 0)

    @property
    def mean_segment_length(self) -> float:
        segs = ([self.title] if self.title else []) + self.instructions
        return float(np.mean([len(s) for s in segs])) if segs else 0.0

    def to_json(self, words: WordVocabulary, ingredient_names: Sequence[str]) -> dict:
        text = lambda seg: " ".join(words.words[i] for i in seg)
        return {"id": self.image_id, "title": text(self.title),
                "ingredients": [ingredient_names[i] for i in self.ingredients],
                "instructions": [text(s) for s in self.instructions],
                "truncated": self.truncated}


class RecipeModel(Module):
    def __init__(self, config: ModelConfig, variant=Variant.FULL,
                 strategy: FusionStrategy = FusionStrategy.CONCATENATED, seed: int = 0,
                 image_channels: int | None = None):
        self.config = config
        self.variant = Variant(variant)
        self.strategy, self.uses_image, self.uses_ingredients = ablation_variant(variant, strategy)
        rng = np.random.default_rng(seed)
        self.drop_rng = DropoutRNG(seed + 1)
        self.encoder = ImageEncoder(config, rng, self.drop_rng, image_channels) if self.uses_image else None
        self.ingr_embed = Embedding(config.n_ingredients, config.d_model, rng) if self.uses_ingredients else None
        self.decoder = TransformerDecoder(config, config.n_words, config.n_words, self.strategy,
                                          rng, self.drop_rng, max_len=config.max_instruction_words)

    def encode_ingredients(self, sets: Sequence[Sequence[int]]) -> Condition:
        """One embedding row per ingredient in ascending id order; padded rows are masked."""
        rows = [sorted(int(i) for i in s) for s in sets]
        if any(len(r) == 0 for r in rows):
            raise ValueError("cannot embed an empty ingredient set")
        k = max(len(r) for r in rows)
        ids = np.zeros((len(rows), k), dtype=np.int64)
        mask = np.zeros((len(rows), k), dtype=bool)
        for b, r in enumerate(rows):
            ids[b, :len(r)] = r
            mask[b, :len(r)] = True
        values = self.ingr_embed(ids)
        return Condition(values, None if mask.all() else mask)

    def conditions(self, features, sets) -> tuple[Condition | None, Condition | None]:
        image = Condition(self.encoder(features)) if self.uses_image else None
        ingr = self.encode_ingredients(sets) if self.uses_ingredients else None
        return image, ingr

    def conditioning_positions(self, features, sets) -> int:
        image, ingr = self.conditions(features, sets)
        return (image.positions if image else 0) + (ingr.positions if ingr else 0)

    def logits(self, features, sets, input_ids) -> Tensor:
        image, ingr = self.conditions(features, sets)
        return self.decoder(np.asarray(input_ids), image, ingr)

    def _check_tokens(self, tokens):
        for seq in tokens:
            if len(seq) < 2:
                raise ValueError("token sequence needs at least start and end tokens")
            if max(seq) >= self.config.n_words or min(seq) < 0:
                raise ValueError("token id outside the word vocabulary")

    def nll(self, features, sets, tokens: Sequence[Sequence[int]]) -> Tensor:
        """Teacher-forced mean negative log-likelihood per target token."""
        self._check_tokens(tokens)
        inputs, targets, weights = pad_batch(tokens)
        return T.cross_entropy(self.logits(features, sets, inputs), targets, row_weights=weights)

    def token_nll(self, features, sets, tokens) -> np.ndarray:
        """Per-target-token NLL values (padding removed), no gradients."""
        self._check_tokens(tokens)
        inputs, targets, weights = pad_batch(tokens)
        with T.no_grad():
            z = self.logits(features, sets, inputs).data.astype(np.float64)
        mx = z.max(axis=-1, keepdims=True)
        logp = z - mx - np.log(np.exp(z - mx).sum(axis=-1, keepdims=True))
        nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        return nll[weights > 0]

    def generate(self, features, sets, vocab: WordVocabulary, max_len: int | None = None,
                 image_ids: Sequence[str] | None = None) -> list[GeneratedRecipe]:
        """Greedy decoding from the start token until end-of-recipe or ``max_len`` tokens."""
        max_len = max_len or self.config.max_instruction_words
        with T.no_grad():
            image, ingr = self.conditions(features, sets)
            b = len(sets) if sets is not None else image.values.shape[0]
            seqs = np.full((b, 1), vocab.sor_id, dtype=np.int64)
            done = np.zeros(b, dtype=bool)
            while seqs.shape[1] < max_len and not done.all():
                z = self.decoder(seqs, image, ingr).data[:, -1]
                nxt = np.argmax(z, axis=-1)
                nxt = np.where(done, vocab.pad_id, nxt)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == vocab.eor_id
        out = []
        for r in range(b):
            toks = [int(t) for t in seqs[r]]
            ended = vocab.eor_id in toks
            if ended:
                toks = toks[: toks.index(vocab.eor_id) + 1]
            segments = split_segments(toks, vocab)
            title = segments[0] if segments else []
            out.append(GeneratedRecipe(
                title=title, instructions=segments[1:],
                ingredients=sorted(sets[r]) if sets is not None else [],
                image_id=image_ids[r] if image_ids is not None else None,
                truncated=not ended, degenerate=not title, tokens=toks))
        return out


def pad_batch(tokens: Sequence[Sequence[int]], pad_id: int = 0):
    """Shifted (inputs, targets, weights) for teacher forcing."""
    t = max(len(s) for s in tokens) - 1
    b = len(tokens)
    inputs = np.full((b, t), pad_id, dtype=np.int64)
    targets = np.full((b, t), pad_id, dtype=np.int64)
    weights = np.zeros((b, t))
    for r, seq in enumerate(tokens):
        n = len(seq) - 1
        inputs[r, :n] = seq[:-1]
        targets[r, :n] = seq[1:]
        weights[r, :n] = 1.0
    return inputs, targets, weights


def perplexity(model: RecipeModel, batches) -> float:
    """exp of the corpus mean per-token NLL; ``batches`` yields (features, sets, tokens)."""
    total, count = 0.0, 0
    for features, sets, tokens in batches:
        nll = model.token_nll(features, sets, tokens)
        total += float(nll.sum())
        count += nll.size
    if count == 0:
        raise ValueError("perplexity of an empty dataset")
    return math.exp(total / count)
