"""Ingredient and recipe evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .vocab import IngredientVocabulary, normalize_name, tokenize, VocabularyError

# Reference numbers from the full-scale experiments; not reproducible on synthetic data.
FULL_SCALE_REFERENCE = {
    "ppl_concatenated_val": 8.50,
    "ppl_full_test": 8.51,
    "ppl_l2r_test": 8.67,
    "ppl_i2r_test": 9.66,
    "tf_set_iou_val": 31.80,
    "tf_set_f1_val": 48.26,
    "tf_set_iou_test": 32.11,
    "tf_set_f1_test": 48.61,
    "instr_recall": 75.47,
    "instr_precision": 77.13,
    "mean_ingredients": 7.99,
    "std_ingredients": 3.21,
}


@dataclass
class ConfusionAccumulator:
    """Per-ingredient TP/FP/FN counts accumulated over a whole split."""

    n: int
    tp: np.ndarray = field(default=None)
    fp: np.ndarray = field(default=None)
    fn: np.ndarray = field(default=None)
    samples: int = 0

    def __post_init__(self):
        for name in ("tp", "fp", "fn"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.n, dtype=np.int64))

    def update(self, predicted: Iterable[int], gt: Iterable[int]) -> "ConfusionAccumulator":
        p = np.zeros(self.n, dtype=bool)
        g = np.zeros(self.n, dtype=bool)
        p[list(predicted)] = True
        g[list(gt)] = True
        self.tp += p & g
        self.fp += p & ~g
        self.fn += ~p & g
        self.samples += 1
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        if other.n != self.n:
            raise ValueError("accumulators over different vocabularies")
        return ConfusionAccumulator(self.n, self.tp + other.tp, self.fp + other.fp,
                                    self.fn + other.fn, self.samples + other.samples)

    __add__ = merge

    def totals(self) -> tuple[int, int, int]:
        return int(self.tp.sum()), int(self.fp.sum()), int(self.fn.sum())


def global_iou_f1(acc: ConfusionAccumulator) -> tuple[float, float]:
    tp, fp, fn = acc.totals()
    if tp + fp + fn == 0:
        raise ValueError("IoU/F1 undefined: no predictions and no ground truth")
    return tp / (tp + fp + fn), 2 * tp / (2 * tp + fp + fn)


def per_ingredient_f1(acc: ConfusionAccumulator) -> list[tuple[int, float]]:
    """(id, F1) for ingredients with support or predictions, best first."""
    denom = 2 * acc.tp + acc.fp + acc.fn
    ids = np.nonzero(denom > 0)[0]
    scores = [(int(i), float(2 * acc.tp[i] / denom[i])) for i in ids]
    return sorted(scores, key=lambda x: (-x[1], x[0]))


def cardinality_error(pred_sizes: Sequence[int], gt_sizes: Sequence[int]) -> tuple[float, float, float]:
    """Mean and std of | |pred| - |gt| |, plus the mean predicted size."""
    pred = np.asarray(pred_sizes, dtype=np.float64)
    gt = np.asarray(gt_sizes, dtype=np.float64)
    if pred.shape != gt.shape or pred.size == 0:
        raise ValueError("cardinality_error needs equally many non-zero samples")
    err = np.abs(pred - gt)
    return float(err.mean()), float(err.std()), float(pred.mean())


def precision_at_k(ranked: Sequence[int], gt: Iterable[int], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    gt = set(gt)
    if not gt:
        return 0.0
    return len(set(list(ranked)[:k]) & gt) / k


def mentioned_ingredients(instructions: Sequence[str], vocab: IngredientVocabulary) -> set[int]:
    """Vocabulary ids whose canonical name occurs as a word n-gram within a segment."""
    max_len = max(len(n.split()) for n in vocab.names)
    found: set[int] = set()
    for seg in instructions:
        words = [w for w in tokenize(seg) if w.isalnum()]
        for n in range(1, max_len + 1):
            for i in range(len(words) - n + 1):
                try:
                    name = normalize_name(" ".join(words[i:i + n]))
                except VocabularyError:
                    continue
                if name in vocab:
                    found.add(vocab.id_of(name))
    return found


@dataclass
class InstructionMatch:
    recall: float
    precision: float
    precision_defined: bool


def instruction_ingredient_pr(instructions: Sequence[str], gt: Iterable[int],
                              vocab: IngredientVocabulary) -> InstructionMatch:
    gt = set(gt)
    mentioned = mentioned_ingredients(instructions, vocab)
    hits = len(mentioned & gt)
    recall = hits / len(gt) if gt else 0.0
    if not mentioned:
        return InstructionMatch(recall, 0.0, False)
    return InstructionMatch(recall, hits / len(mentioned), True)


def evaluation_report(acc: ConfusionAccumulator | None = None,
                      pred_sizes: Sequence[int] | None = None,
                      gt_sizes: Sequence[int] | None = None,
                      p_at_k: dict[int, float] | None = None,
                      instr: Sequence[InstructionMatch] | None = None,
                      perplexity: float | None = None) -> dict:
    """Flat report; quantities that were not measured are null."""
    report = {"iou": None, "f1": None, "card_error_mean": None, "card_error_std": None,
              "mean_pred_size": None, "p_at_k": {}, "instr_recall": None,
              "instr_precision": None, "perplexity": perplexity}
    if acc is not None and sum(acc.totals()) > 0:
        report["iou"], report["f1"] = global_iou_f1(acc)
    if pred_sizes is not None and gt_sizes is not None and len(gt_sizes):
        m, s, mp = cardinality_error(pred_sizes, gt_sizes)
        report.update(card_error_mean=m, card_error_std=s, mean_pred_size=mp)
    if p_at_k:
        report["p_at_k"] = {str(k): v for k, v in sorted(p_at_k.items())}
    if instr:
        report["instr_recall"] = float(np.mean([m.recall for m in instr]))
        report["instr_precision"] = float(np.mean([m.precision for m in instr]))
    return report
