"""Ingredient prediction: set transformer, list transformer and feed-forward baselines."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import (Condition, ConfigError, Dropout, DropoutRNG, FusionStrategy, ImageEncoder, Linear,
                 Module, ModelConfig, TransformerDecoder)
from .tensor import Tensor

LABEL_SMOOTHING = 0.1
SET_LOSS_WEIGHTS = (1000.0, 1.0, 1.0)  # pooled BCE, eos BCE, cardinality penalty


class ModelKind(str, enum.Enum):
    TF_SET = "tf-set"
    TF_LIST = "tf-list"
    TF_LIST_SHUFFLE = "tf-list-shuffle"
    FF_BCE = "ff-bce"
    FF_TD = "ff-td"
    FF_IOU = "ff-iou"
    FF_DC = "ff-dc"


@dataclass
class IngredientPrediction:
    ids: list[int]
    ranked: list[int]
    probs: np.ndarray  # per-ingredient score used for ranking
    step_probs: np.ndarray | None = None  # (T, N) for transformer models
    eos_step: int | None = None


def validate_list(ids: Sequence[int], n: int) -> list[int]:
    ids = [int(i) for i in ids]
    if len(set(ids)) != len(ids):
        raise ValueError(f"ingredient list has repeated ids: {ids}")
    if any(i < 0 or i >= n for i in ids):
        raise ValueError(f"ingredient id out of range [0, {n})")
    return ids


def multi_hot(sets: Sequence[Sequence[int]], n: int, dtype=None) -> np.ndarray:
    out = np.zeros((len(sets), n), dtype=dtype or T.get_default_dtype())
    for r, ids in enumerate(sets):
        out[r, validate_list(ids, n)] = 1.0
    return out


# -- pure loss and sampling functions -------------------------------------------

def pool_over_time(step_probs: Tensor, step_mask: np.ndarray | None = None) -> Tensor:
    """Max over the time axis (-2) of ingredient probabilities.

    ``step_mask`` (..., T) zeroes steps that must not contribute; probabilities
    are non-negative so a zeroed step never wins unless every step is zero.
    """
    if step_probs.shape[-2] < 1:
        raise ValueError("pool_over_time needs at least one step")
    if step_mask is not None:
        step_probs = step_probs * np.asarray(step_mask, dtype=step_probs.dtype)[..., None]
    pooled, _ = T.max_over_axis(step_probs, axis=-2)
    return pooled


def eos_targets(cardinalities: Sequence[int], n_steps: int) -> np.ndarray:
    """Unit step per row: 0 while ingredients are due, 1 from step K on."""
    k = np.asarray(cardinalities)
    if (k > n_steps).any():
        raise ValueError(f"cardinality {int(k.max())} exceeds the {n_steps} decoding steps")
    return (np.arange(n_steps)[None, :] >= k[:, None]).astype(T.get_default_dtype())


def tf_set_loss_terms(pooled: Tensor, eos_logits: Tensor, gt: np.ndarray,
                      label_smoothing: float = LABEL_SMOOTHING) -> dict[str, Tensor]:
    gt = np.atleast_2d(np.asarray(gt, dtype=pooled.dtype))
    if pooled.ndim == 1:
        pooled = pooled.reshape(1, -1)
        eos_logits = eos_logits.reshape(1, -1)
    k = gt.sum(axis=-1)
    targets = eos_targets(k.astype(int), eos_logits.shape[-1]).astype(pooled.dtype)
    ingr = T.bce(pooled, gt, label_smoothing)
    eos = T.bce_with_logits(eos_logits, targets, label_smoothing)
    card = T.abs_(pooled.sum(axis=-1) - Tensor(k, dtype=pooled.dtype)).mean()
    return {"ingr": ingr, "eos": eos, "card": card}


def tf_set_loss(pooled: Tensor, eos_logits: Tensor, gt: np.ndarray,
                label_smoothing: float = LABEL_SMOOTHING,
                weights: tuple[float, float, float] = SET_LOSS_WEIGHTS) -> Tensor:
    terms = tf_set_loss_terms(pooled, eos_logits, gt, label_smoothing)
    w_ingr, w_eos, w_card = weights
    return terms["ingr"] * w_ingr + terms["eos"] * w_eos + terms["card"] * w_card


def ff_bce_loss(logits: Tensor, gt: np.ndarray, label_smoothing: float = LABEL_SMOOTHING) -> Tensor:
    return T.bce_with_logits(logits, np.asarray(gt, dtype=logits.dtype), label_smoothing)


def ff_td_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Cross-entropy against the target distribution s / sum(s)."""
    gt = np.asarray(gt, dtype=np.float64)
    k = gt.sum(axis=-1, keepdims=True)
    if (k < 1).any():
        raise ValueError("target distribution undefined for an empty ingredient set")
    return T.cross_entropy(logits, (gt / k).astype(logits.dtype))


def ff_iou_loss(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Soft Jaccard loss 1 - sum(p s) / sum(p + s - p s), p = sigmoid(logits), batch mean."""
    s = np.asarray(gt, dtype=logits.dtype)
    p = T.sigmoid(logits)
    inter = (p * s).sum(axis=-1)
    union = (p + s - p * s).sum(axis=-1)
    return (1.0 - inter * T.reciprocal(union)).mean()


def ff_dc_loss(logits: Tensor, card_logits: Tensor, gt: np.ndarray,
               label_smoothing: float = LABEL_SMOOTHING) -> Tensor:
    gt = np.asarray(gt, dtype=logits.dtype)
    k = gt.sum(axis=-1).astype(np.int64)
    if (k >= card_logits.shape[-1]).any():
        raise ValueError("cardinality exceeds the cardinality head")
    return ff_bce_loss(logits, gt, label_smoothing) + T.cross_entropy(card_logits, k)


def _rank(probs: np.ndarray) -> np.ndarray:
    """Ids by descending probability, ties to the lower id."""
    probs = np.asarray(probs)
    return np.lexsort((np.arange(probs.size), -probs))


def td_sample(probs: np.ndarray, threshold: float = 0.5) -> list[int]:
    """Smallest top-probability prefix whose cumulative sum strictly exceeds ``threshold``."""
    probs = np.asarray(probs, dtype=np.float64)
    order = _rank(probs)
    cum = np.cumsum(probs[order])
    over = np.nonzero(cum > threshold)[0]
    k = int(over[0]) + 1 if over.size else probs.size
    return sorted(int(i) for i in order[:k])


def dc_sample(probs: np.ndarray, card_logits: np.ndarray) -> list[int]:
    """Top-c ingredients where c is the most likely cardinality."""
    c = min(int(np.argmax(card_logits)), len(probs))
    return sorted(int(i) for i in _rank(probs)[:c])


def threshold_sample(probs: np.ndarray, threshold: float = 0.5) -> list[int]:
    return [int(i) for i in np.nonzero(np.asarray(probs) > threshold)[0]]


# -- models -----------------------------------------------------------------

def _image_condition(feats: Tensor) -> Condition:
    return Condition(feats, None)


class IngredientModel(Module):
    kind: ModelKind

    def image_features(self, features) -> Tensor:
        return self.encoder(features)

    def loss(self, features, gt_lists: Sequence[Sequence[int]],
             rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def predict(self, features, threshold: float = 0.5) -> list[IngredientPrediction]:
        raise NotImplementedError


class FeedForwardIngredients(IngredientModel):
    """Two-layer perceptron over mean-pooled image features."""

    def __init__(self, config: ModelConfig, kind: ModelKind, seed: int = 0,
                 image_channels: int | None = None, hidden: int | None = None):
        self.kind = ModelKind(kind)
        self.config = config
        rng = np.random.default_rng(seed)
        self.drop_rng = DropoutRNG(seed + 1)
        hidden = hidden or 4 * config.d_model
        self.encoder = ImageEncoder(config, rng, self.drop_rng, image_channels)
        self.fc1 = Linear(config.d_model, hidden, rng)
        self.fc2 = Linear(hidden, config.n_ingredients, rng)
        self.card = (Linear(hidden, config.max_ingredients + 1, rng)
                     if self.kind is ModelKind.FF_DC else None)
        self.drop = Dropout(config.dropout, self.drop_rng)

    def forward(self, features) -> tuple[Tensor, Tensor | None]:
        pooled = self.image_features(features).mean(axis=-2)
        h = self.drop(T.relu(self.fc1(pooled)))
        card = self.card(h) if self.card is not None else None
        return self.fc2(h), card

    def loss(self, features, gt_lists, rng=None) -> Tensor:
        logits, card = self.forward(features)
        gt = multi_hot(gt_lists, self.config.n_ingredients, logits.dtype)
        if self.kind is ModelKind.FF_BCE:
            return ff_bce_loss(logits, gt)
        if self.kind is ModelKind.FF_TD:
            return ff_td_loss(logits, gt)
        if self.kind is ModelKind.FF_IOU:
            return ff_iou_loss(logits, gt)
        return ff_dc_loss(logits, card, gt)

    def predict(self, features, threshold: float = 0.5) -> list[IngredientPrediction]:
        with T.no_grad():
            logits, card = self.forward(features)
        z = logits.data.astype(np.float64)
        if self.kind is ModelKind.FF_TD:
            e = np.exp(z - z.max(axis=-1, keepdims=True))
            probs = e / e.sum(axis=-1, keepdims=True)
        else:
            probs = T._sigmoid(z)
        preds = []
        for r, p in enumerate(probs):
            if self.kind is ModelKind.FF_TD:
                ids = td_sample(p, threshold)
            elif self.kind is ModelKind.FF_DC:
                ids = dc_sample(p, card.data[r])
            else:
                ids = threshold_sample(p, threshold)
            preds.append(IngredientPrediction(ids, [int(i) for i in _rank(p)], p))
        return preds


class TransformerIngredients(IngredientModel):
    """Autoregressive ingredient decoder attending over image features.

    Inputs: ids 0..N-1 are ingredients, N is the start token. Outputs: N
    ingredient logits plus one eos logit (index N).
    """

    def __init__(self, config: ModelConfig, kind: ModelKind, seed: int = 0,
                 image_channels: int | None = None):
        self.kind = ModelKind(kind)
        if self.kind not in (ModelKind.TF_SET, ModelKind.TF_LIST, ModelKind.TF_LIST_SHUFFLE):
            raise ConfigError(f"{kind} is not a transformer model")
        self.config = config
        rng = np.random.default_rng(seed)
        self.drop_rng = DropoutRNG(seed + 1)
        n = config.n_ingredients
        self.encoder = ImageEncoder(config, rng, self.drop_rng, image_channels)
        self.decoder = TransformerDecoder(config, n + 1, n + 1, FusionStrategy.SINGLE_CONDITION,
                                          rng, self.drop_rng, max_len=config.max_ingredients + 1)

    @property
    def start_id(self) -> int:
        return self.config.n_ingredients

    @property
    def eos_id(self) -> int:
        return self.config.n_ingredients

    def step_logits(self, image: Tensor, input_ids: np.ndarray) -> Tensor:
        return self.decoder(input_ids, _image_condition(image), None)

    def greedy_decode(self, image: Tensor, n_steps: int) -> tuple[np.ndarray, np.ndarray]:
        """Step-by-step argmax decoding on the model's own selections, never repeating.

        Returns the (B, n_steps) selected ids and (B, n_steps, N + 1) raw logits.
        """
        n = self.config.n_ingredients
        b = image.shape[0]
        ids = np.full((b, 1), self.start_id, dtype=np.int64)
        chosen = np.zeros((b, n), dtype=bool)
        logits_out = np.zeros((b, n_steps, n + 1), dtype=image.dtype)
        with T.no_grad():
            for t in range(n_steps):
                logits = self.step_logits(image, ids).data[:, -1]
                logits_out[:, t] = logits
                ingr = np.where(chosen, -np.inf, logits[:, :n])
                pick = np.argmax(ingr, axis=-1)
                chosen[np.arange(b), pick] = True
                ids = np.concatenate([ids, pick[:, None]], axis=1)
        return ids[:, 1:], logits_out

    # set transformer ---------------------------------------------------------
    def set_forward(self, features, n_steps: int | None = None):
        """Decode on own outputs, then recompute every step with gradients in one pass.

        Causal attention makes the parallel recomputation equal the step-wise
        decode. Returns masked ingredient logits (B, T, N), eos logits (B, T)
        and the selected ids (B, T).
        """
        n_steps = self.config.max_ingredients if n_steps is None else n_steps
        if n_steps < 1:
            raise ConfigError("max_ingredients must be >= 1")
        n = self.config.n_ingredients
        image = self.image_features(features)
        was_training = self.training
        self.eval()
        try:
            selected, _ = self.greedy_decode(image.detach(), n_steps)
        finally:
            self.train(was_training)
        b = selected.shape[0]
        inputs = np.concatenate([np.full((b, 1), self.start_id), selected[:, :-1]], axis=1)
        logits = self.step_logits(image, inputs)
        # step t masks every id chosen at steps < t
        prev = np.zeros((b, n_steps, n), dtype=bool)
        for t in range(1, n_steps):
            prev[:, t] = prev[:, t - 1]
            prev[np.arange(b), t, selected[:, t - 1]] = True
        ingr_logits = T.masked_fill(logits[:, :, :n], prev, -np.inf)
        eos_logits = logits[:, :, n]
        return ingr_logits, eos_logits, selected

    def _set_loss(self, features, gt_lists) -> Tensor:
        ingr_logits, eos_logits, _ = self.set_forward(features)
        gt = multi_hot(gt_lists, self.config.n_ingredients, ingr_logits.dtype)
        k = np.array([len(g) for g in gt_lists])
        steps = ingr_logits.shape[1]
        if (k > steps).any():
            raise ValueError(f"cardinality {int(k.max())} exceeds {steps} decoding steps")
        probs = T.softmax(ingr_logits, axis=-1)
        pooled = pool_over_time(probs, np.arange(steps)[None, :] < k[:, None])
        return tf_set_loss(pooled, eos_logits, gt)

    # list transformer -----------------------------------------------------
    def _list_loss(self, features, gt_lists, rng) -> Tensor:
        n = self.config.n_ingredients
        lists = [validate_list(g, n) for g in gt_lists]
        if self.kind is ModelKind.TF_LIST_SHUFFLE:
            if rng is None:
                raise ValueError("shuffled list training needs an rng")
            lists = [list(np.asarray(g)[rng.permutation(len(g))]) for g in lists]
        return tf_list_loss(self, self.image_features(features), lists)

    def loss(self, features, gt_lists, rng=None) -> Tensor:
        if self.kind is ModelKind.TF_SET:
            return self._set_loss(features, gt_lists)
        return self._list_loss(features, gt_lists, rng)

    def predict(self, features, threshold: float = 0.5) -> list[IngredientPrediction]:
        n = self.config.n_ingredients
        with T.no_grad():
            image = self.image_features(features)
        selected, logits = self.greedy_decode(image, self.config.max_ingredients)
        preds = []
        for r in range(selected.shape[0]):
            chosen: list[int] = []
            step_probs = []
            stop = None
            for t in range(selected.shape[1]):
                z = logits[r, t].astype(np.float64)
                ingr = z[:n].copy()
                ingr[chosen] = -np.inf
                if self.kind is ModelKind.TF_SET:
                    e = np.exp(ingr - ingr.max())
                    p = e / e.sum()
                    p_eos = float(T._sigmoid(np.array([z[n]]))[0])
                    if p_eos > p.max():
                        stop = t
                        break
                else:
                    full = np.concatenate([ingr, z[n:]])
                    e = np.exp(full - full.max())
                    pf = e / e.sum()
                    p = pf[:n]
                    if np.argmax(pf) == n:
                        stop = t
                        break
                step_probs.append(p)
                chosen.append(int(selected[r, t]))
            sp = np.array(step_probs) if step_probs else np.zeros((0, n))
            if self.kind is ModelKind.TF_SET:
                score = sp.max(axis=0) if len(sp) else np.zeros(n)
                ranked = [int(i) for i in _rank(score)]
            else:
                # decoded order first, then the remaining ids by first-step probability
                first = _first_step_probs(logits[r, 0], n)
                score = first
                rest = [int(i) for i in _rank(first) if int(i) not in chosen]
                ranked = chosen + rest
            preds.append(IngredientPrediction(sorted(chosen), ranked, score, sp, stop))
        return preds


def _first_step_probs(z: np.ndarray, n: int) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max())
    return (e / e.sum())[:n]


def tf_list_loss(model: TransformerIngredients, image: Tensor,
                 lists: Sequence[Sequence[int]]) -> Tensor:
    """Teacher-forced mean NLL over K + 1 steps per list (eos as last target)."""
    n = model.config.n_ingredients
    b = len(lists)
    steps = max(len(g) for g in lists) + 1
    if steps - 1 > model.config.max_ingredients:
        raise ValueError("ingredient list longer than max_ingredients")
    inputs = np.full((b, steps), model.start_id, dtype=np.int64)
    targets = np.full((b, steps), model.eos_id, dtype=np.int64)
    weights = np.zeros((b, steps))
    for r, g in enumerate(lists):
        g = validate_list(g, n)
        inputs[r, 1:len(g) + 1] = g
        targets[r, :len(g)] = g
        weights[r, :len(g) + 1] = 1.0
    logits = model.step_logits(image, inputs)
    return T.cross_entropy(logits, targets, row_weights=weights)


def build_ingredient_model(config: ModelConfig, kind, seed: int = 0,
                           image_channels: int | None = None) -> IngredientModel:
    kind = ModelKind(kind)
    if kind.value.startswith("tf"):
        return TransformerIngredients(config, kind, seed, image_channels)
    return FeedForwardIngredients(config, kind, seed, image_channels)
