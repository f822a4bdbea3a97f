"""Command-line entry points: synth, build-vocab, train-ingredients, train-recipe, generate, evaluate.

Exit status is 0 on success, 1 when flags, files or configs fail validation
and 2 when the work itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset, read_jsonl, recipe_segments, write_jsonl
from .ingredients import ModelKind
from .instructions import Variant
from .metrics import ConfusionAccumulator, evaluation_report, instruction_ingredient_pr
from .nn import ConfigError, FusionStrategy, ModelConfig, desk_config, read_features
from .synthetic import SyntheticSpec, generate_dataset
from .training import (Checkpoint, TrainConfig, desk_train_config, evaluate_ingredients,
                       load_checkpoint, load_ingredient_model, load_recipe_model, recipe_perplexity,
                       save_checkpoint, train_stage1, train_stage2)
from .vocab import IngredientVocabulary, WordVocabulary, build_ingredient_vocab, build_word_vocab, detokenize

log = logging.getLogger("invcook")

COMMANDS = ("synth", "build-vocab", "train-ingredients", "train-recipe", "generate", "evaluate")
CONFIG_KEYS = {"model", "train", "min_count", "variant"}


class UsageError(Exception):
    """Bad flags, missing files or incompatible configs."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="invcook", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", type=Path)
    p.add_argument("--model", type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--report", type=Path)
    p.add_argument("--image", type=Path)
    p.add_argument("--ingredients-model", type=Path)
    p.add_argument("--gt-ingredients", action="store_true")
    p.add_argument("--strategy", choices=[s.value for s in FusionStrategy if s.value != "single"],
                   default="concat")
    p.add_argument("--ingredient-model", choices=[k.value for k in ModelKind], default="tf-set")
    p.add_argument("--threshold", type=float, default=0.5)
    return p


# -- helpers --------------------------------------------------------------------

def _need(args, *flags):
    for f in flags:
        if getattr(args, f.replace("-", "_")) is None:
            raise UsageError(f"{args.command} requires --{f}")


def _exists(path: Path, flag: str) -> Path:
    if not path.exists():
        raise UsageError(f"--{flag}: {path} does not exist")
    return path


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    try:
        cfg = json.loads(_exists(args.config, "config").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"--config: {args.config} is not valid JSON ({exc})") from exc
    unknown = set(cfg) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"--config: unknown keys {sorted(unknown)}")
    return cfg


def _split_paths(data: Path) -> tuple[Path, Path, Path]:
    """Training and validation files plus the directory feature paths are relative to."""
    if data.is_dir():
        return _exists(data / "train.jsonl", "data"), _exists(data / "val.jsonl", "data"), data
    raise UsageError(f"--data: {data} must be a directory holding train.jsonl and val.jsonl")


def _vocab_to_dict(ingr: IngredientVocabulary, words: WordVocabulary) -> dict:
    return {"ingredients": {"names": ingr.names, "counts": ingr.counts, "merge_log": ingr.merge_log},
            "words": {"words": words.words, "counts": words.counts}}


def _vocab_from_ckpt(ckpt: Checkpoint) -> tuple[IngredientVocabulary, WordVocabulary]:
    v = ckpt.config.get("vocab")
    if v is None:
        raise UsageError("checkpoint carries no vocabulary")
    return (IngredientVocabulary(v["ingredients"]["names"], v["ingredients"]["counts"],
                                 v["ingredients"]["merge_log"]),
            WordVocabulary(v["words"]["words"], v["words"]["counts"]))


def _read_ckpt(path: Path, flag: str) -> Checkpoint:
    try:
        return load_checkpoint(_exists(path, flag))
    except (ValueError, KeyError) as exc:
        raise UsageError(f"--{flag}: {exc}") from exc


def _model_config(cfg: dict, ingr, words, records, base: Path) -> ModelConfig:
    feats = read_features(base / records[0]["image"])
    overrides = dict(n_ingredients=len(ingr), n_words=len(words), n_positions=feats.shape[0],
                     feature_dim=feats.shape[1])
    overrides.update(cfg.get("model", {}))
    try:
        return desk_config(**overrides)
    except (ConfigError, TypeError) as exc:
        raise UsageError(f"--config: {exc}") from exc


def _train_config(cfg: dict, kind: str, seed: int) -> TrainConfig:
    try:
        return desk_train_config(kind, **cfg.get("train", {}), seed=seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"--config: {exc}") from exc


def _datasets(args, cfg, ingr=None, words=None):
    train_path, val_path, base = _split_paths(args.data)
    train_recs, val_recs = read_jsonl(train_path), read_jsonl(val_path)
    min_count = int(cfg.get("min_count", 10))
    if ingr is None:
        ingr = build_ingredient_vocab(train_recs, min_count=min_count)
        words = build_word_vocab((recipe_segments(r) for r in train_recs), min_count=min_count)
    mc = _model_config(cfg, ingr, words, train_recs, base)
    load = lambda recs: load_dataset(recs, ingr, words, base, max_len=mc.max_instruction_words,
                                     max_ingredients=mc.max_ingredients)
    return load(train_recs), load(val_recs), ingr, words, mc


# -- commands -------------------------------------------------------------------

def cmd_synth(args, cfg) -> dict:
    _need(args, "spec", "out")
    try:
        spec = json.loads(_exists(args.spec, "spec").read_text(encoding="utf-8"))
        spec.setdefault("seed", args.seed)
        spec = SyntheticSpec.from_dict(spec)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"--spec: {exc}") from exc
    paths = generate_dataset(spec, args.out)
    return {name: str(p) for name, p in paths.items()}


def cmd_build_vocab(args, cfg) -> dict:
    _need(args, "data", "out")
    path = args.data / "train.jsonl" if args.data.is_dir() else args.data
    records = read_jsonl(_exists(path, "data"))
    min_count = int(cfg.get("min_count", 10))
    ingr = build_ingredient_vocab(records, min_count=min_count)
    words = build_word_vocab((recipe_segments(r) for r in records), min_count=min_count)
    args.out.mkdir(parents=True, exist_ok=True)
    ingr.save(args.out / "ingredients.tsv", args.out / "merges.tsv")
    words.save(args.out / "words.tsv")
    return {"ingredients": len(ingr), "words": len(words)}


def cmd_train_ingredients(args, cfg) -> dict:
    _need(args, "data", "out")
    train, val, ingr, words, mc = _datasets(args, cfg)
    tc = _train_config(cfg, args.ingredient_model, args.seed)
    res = train_stage1(train, val, args.ingredient_model, mc, tc, header={"vocab": _vocab_to_dict(ingr, words)})
    save_checkpoint(args.out, res.checkpoint)
    return {"epochs": res.epochs_run, "best_epoch": res.checkpoint.epoch, "best_val": res.checkpoint.best_val}


def cmd_train_recipe(args, cfg) -> dict:
    _need(args, "data", "out")
    variant = cfg.get("variant", "full")
    try:
        variant = Variant(variant)
    except ValueError as exc:
        raise UsageError(f"--config: unknown variant {variant!r}") from exc
    stage1 = None
    ingr = words = None
    if variant is not Variant.L2R or args.model is not None:
        _need(args, "model")
        stage1 = _read_ckpt(args.model, "model")
        if stage1.config.get("stage") != 1:
            raise UsageError("--model: expected an ingredient (stage-1) checkpoint")
        ingr, words = _vocab_from_ckpt(stage1)
    train, val, ingr, words, mc = _datasets(args, cfg, ingr, words)
    if stage1 is not None:
        # the decoder must match the encoder it inherits
        s1 = ModelConfig.from_dict(stage1.config["model_config"])
        for key in ("d_model", "n_heads", "head_dim", "dropout"):
            if key not in cfg.get("model", {}):
                setattr(mc, key, getattr(s1, key))
    tc = _train_config(cfg, "recipe", args.seed)
    try:
        res = train_stage2(train, val, stage1, mc, tc, variant, FusionStrategy(args.strategy),
                           header={"vocab": _vocab_to_dict(ingr, words)})
    except ValueError as exc:
        if "stage-1 checkpoint" in str(exc):
            raise UsageError(f"--model: {exc}") from exc
        raise
    save_checkpoint(args.out, res.checkpoint)
    return {"epochs": res.epochs_run, "best_epoch": res.checkpoint.epoch,
            "val_perplexity": float(np.exp(res.checkpoint.best_val))}


def _samples(args):
    """(ids, features, records) from --image or --data."""
    if args.image is not None:
        feats = read_features(_exists(args.image, "image"))
        return [args.image.stem], feats[None], [None]
    _need(args, "data")
    path = _exists(args.data, "data")
    records = read_jsonl(path)
    feats = np.stack([read_features(path.parent / r["image"]) for r in records])
    return [r["id"] for r in records], feats, records


def cmd_generate(args, cfg) -> dict:
    _need(args, "model", "out")
    recipe = _read_ckpt(args.model, "model")
    if recipe.config.get("stage") != 2:
        raise UsageError("--model: expected a recipe (stage-2) checkpoint")
    ingr, words = _vocab_from_ckpt(recipe)
    ids, feats, records = _samples(args)
    if args.gt_ingredients:
        if records[0] is None:
            raise UsageError("--gt-ingredients needs --data records with ingredient lists")
        sets = [ingr.ids_for(r["ingredients"]) or [0] for r in records]
    else:
        _need(args, "ingredients-model")
        ckpt = _read_ckpt(args.ingredients_model, "ingredients-model")
        if ckpt.config.get("stage") != 1:
            raise UsageError("--ingredients-model: expected an ingredient (stage-1) checkpoint")
        if _vocab_from_ckpt(ckpt)[0].names != ingr.names:
            raise UsageError("--ingredients-model: ingredient vocabulary differs from --model")
        preds = load_ingredient_model(ckpt).predict(feats, args.threshold)
        sets = [p.ids or [int(p.ranked[0])] for p in preds]
    model = load_recipe_model(recipe)
    recipes = model.generate(feats, sets, words, image_ids=ids)
    write_jsonl(args.out, [r.to_json(words, ingr.names) for r in recipes])
    return {"recipes": len(recipes), "truncated": sum(r.truncated for r in recipes)}


def cmd_evaluate(args, cfg) -> dict:
    _need(args, "model", "data", "report")
    ckpt = _read_ckpt(args.model, "model")
    ingr, words = _vocab_from_ckpt(ckpt)
    path = _exists(args.data, "data")
    records = read_jsonl(path)
    mc = ModelConfig.from_dict(ckpt.config["model_config"])
    data = load_dataset(records, ingr, words, path.parent, max_len=mc.max_instruction_words,
                        max_ingredients=mc.max_ingredients)
    if ckpt.config.get("stage") == 1:
        ev = evaluate_ingredients(load_ingredient_model(ckpt), data, threshold=args.threshold)
        report = evaluation_report(ev["acc"], ev["pred_sizes"], ev["gt_sizes"], ev["p_at_k"])
    else:
        model = load_recipe_model(ckpt)
        recipes = model.generate(data.features, data.ingredients, words)
        instr = [instruction_ingredient_pr(detokenize(r.tokens, words)[1:], gt, ingr)
                 for r, gt in zip(recipes, data.ingredients)]
        report = evaluation_report(instr=instr, perplexity=recipe_perplexity(model, data))
    args.report.parent.mkdir(parents=True, exist_ok=True)
    args.report.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


HANDLERS = {"synth": cmd_synth, "build-vocab": cmd_build_vocab,
            "train-ingredients": cmd_train_ingredients, "train-recipe": cmd_train_recipe,
            "generate": cmd_generate, "evaluate": cmd_evaluate}


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args)
        if not 0.0 <= args.threshold <= 1.0:
            raise UsageError("--threshold must lie in [0, 1]")
        result = HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"invcook: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"invcook: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
