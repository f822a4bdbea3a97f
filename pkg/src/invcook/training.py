"""Optimizer, schedules, checkpoints and the two-stage training loops."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import RecipeDataset
from .ingredients import IngredientModel, ModelKind, build_ingredient_model
from .instructions import RecipeModel, Variant, perplexity
from .metrics import ConfusionAccumulator, cardinality_error, global_iou_f1, precision_at_k
from .nn import FusionStrategy, Module, ModelConfig

log = logging.getLogger(__name__)

# Encoder learning-rate multipliers used for the full-scale ingredient models.
FULL_SCALE_ENCODER_LR_SCALE = {
    "ff-bce": 0.01, "ff-iou": 0.01, "ff-dc": 0.01, "ff-td": 0.1,
    "tf-list": 0.1, "tf-list-shuffle": 0.1, "tf-set": 1.0,
}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    encoder_lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    lr_decay: float = 0.99
    batch_size: int = 16
    max_epochs: int = 400
    patience: int = 50
    label_smoothing: float = 0.1
    loss_weights: tuple = (1000.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 0:
            raise ValueError("batch_size >= 1, max_epochs >= 0 and patience >= 0 required")

    def lr_at(self, epoch: int, scale: float = 1.0) -> float:
        return self.lr * self.lr_decay ** epoch * scale

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def full_scale_train_config(kind: str) -> TrainConfig:
    """Full-scale hyperparameters for an ingredient model kind or ``"recipe"``."""
    if kind == "recipe":
        return TrainConfig(lr=1e-3, batch_size=256)
    kind = ModelKind(kind).value
    return TrainConfig(lr=1e-4 if kind == "tf-set" else 1e-3,
                       encoder_lr_scale=FULL_SCALE_ENCODER_LR_SCALE[kind],
                       batch_size=256 if kind == "ff-dc" else 300)


def desk_train_config(kind: str, **overrides) -> TrainConfig:
    """Small-scale defaults: every parameter group at full rate, batch 16."""
    base = dict(lr=1e-3, encoder_lr_scale=1.0, batch_size=16, max_epochs=200, patience=20)
    base.update(overrides)
    return TrainConfig(**base)


# -- optimizer --------------------------------------------------------------

class Adam:
    """Adam with bias correction and a per-group learning-rate multiplier."""

    def __init__(self, params: dict[str, T.Tensor], config: TrainConfig,
                 group_scale: Callable[[str], float] | None = None):
        self.params = params
        self.config = config
        self.group_scale = group_scale or (lambda name: 1.0)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, epoch: int = 0) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad:
                continue
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise FloatingPointError(
                    f"non-finite gradient in {name} at step {self.t} "
                    f"(nan={int(np.isnan(g).sum())}, inf={int(np.isinf(g).sum())})")
            m = self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            v = self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            lr = c.lr_at(epoch, self.group_scale(name))
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            p.data = (p.data - update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        out = {"step": np.array(self.t, dtype=np.float32)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["step"])
        for k, p in self.params.items():
            self.m[k] = np.array(state[f"m.{k}"], dtype=p.dtype)
            self.v[k] = np.array(state[f"v.{k}"], dtype=p.dtype)


def early_stop(history: Sequence[float], patience: int) -> bool:
    """True once ``patience`` epochs in a row have failed to beat the best loss.

    Only strict improvements reset the counter; with patience 0 the first
    non-improving epoch stops training.
    """
    best = math.inf
    wait = 0
    for i, v in enumerate(history):
        if v < best:
            best = v
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                return True
    return False


# -- checkpoints ---------------------------------------------------------

CKPT_MAGIC = b"ICKP"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.config.get("epoch", 0))

    @property
    def best_val(self) -> float:
        return float(self.config.get("best_val", math.inf))


def _write_tensors(buf: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _read_tensors(buf: io.BytesIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", buf.read(4))
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", buf.read(2))
        name = buf.read(n).decode("utf-8")
        (rank,) = struct.unpack("<B", buf.read(1))
        dims = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf.read(4 * size), dtype="<f4").reshape(dims).copy()
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    _write_tensors(buf, ckpt.params)
    _write_tensors(buf, ckpt.optimizer)
    text = json.dumps(ckpt.config, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(text)) + text)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    params = _read_tensors(buf)
    optim = _read_tensors(buf)
    (n,) = struct.unpack("<I", buf.read(4))
    config = json.loads(buf.read(n).decode("utf-8"))
    return Checkpoint(params, optim, config)


def snapshot(model: Module) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


# -- evaluation helpers -----------------------------------------------------

def ingredient_loss(model: IngredientModel, data: RecipeDataset, batch_size: int = 256) -> float:
    model.eval()
    total, n = 0.0, 0
    with T.no_grad():
        for batch in data.batches(batch_size):
            loss = model.loss(batch.features, batch.ingredients, np.random.default_rng(0))
            total += float(loss.data) * len(batch)
            n += len(batch)
    return total / n


def evaluate_ingredients(model: IngredientModel, data: RecipeDataset, ks: Sequence[int] = (1, 5, 10),
                         threshold: float = 0.5, batch_size: int = 256) -> dict:
    model.eval()
    acc = ConfusionAccumulator(model.config.n_ingredients)
    pred_sizes, gt_sizes = [], []
    p_at = {k: [] for k in ks}
    predictions = []
    for batch in data.batches(batch_size):
        for pred, gt in zip(model.predict(batch.features, threshold), batch.ingredients):
            acc.update(pred.ids, gt)
            pred_sizes.append(len(pred.ids))
            gt_sizes.append(len(gt))
            for k in ks:
                p_at[k].append(precision_at_k(pred.ranked, gt, k))
            predictions.append(pred)
    iou, f1 = global_iou_f1(acc)
    card = cardinality_error(pred_sizes, gt_sizes)
    return {"acc": acc, "iou": iou, "f1": f1, "card_error": card,
            "p_at_k": {k: float(np.mean(v)) for k, v in p_at.items()},
            "pred_sizes": pred_sizes, "gt_sizes": gt_sizes, "predictions": predictions}


def recipe_batches(data: RecipeDataset, batch_size: int = 128):
    for b in data.batches(batch_size):
        yield b.features, b.ingredients, b.tokens


def recipe_perplexity(model: RecipeModel, data: RecipeDataset, batch_size: int = 128) -> float:
    model.eval()
    return perplexity(model, recipe_batches(data, batch_size))


# -- training loops -------------------------------------------------------

@dataclass
class TrainResult:
    model: Module
    checkpoint: Checkpoint
    train_history: list[float]
    val_history: list[float]
    epochs_run: int


def _encoder_scale(config: TrainConfig):
    return lambda name: config.encoder_lr_scale if name.startswith("encoder.") else 1.0


def _fit(model: Module, train: RecipeDataset, batch_loss, val_loss, config: TrainConfig,
         header: dict, on_epoch=None) -> TrainResult:
    params = model.named_parameters()
    opt = Adam(params, config, _encoder_scale(config))
    rng = np.random.default_rng([config.seed, 7])
    model.drop_rng.reseed(config.seed + 11)
    train_hist, val_hist = [], []
    best, best_state, best_opt, best_epoch = math.inf, snapshot(model), opt.state(), -1
    epoch = 0
    for epoch in range(config.max_epochs):
        model.train()
        total, n = 0.0, 0
        for batch in train.batches(config.batch_size, rng):
            loss = batch_loss(batch, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise FloatingPointError(f"training loss diverged at epoch {epoch}")
            T.backward(loss)
            opt.step(epoch)
            opt.zero_grad()
            total += value * len(batch)
            n += len(batch)
        train_hist.append(total / n)
        val_hist.append(val_loss())
        log.info("epoch %d train %.5f val %.5f", epoch, train_hist[-1], val_hist[-1])
        if val_hist[-1] < best:
            best, best_state, best_opt, best_epoch = val_hist[-1], snapshot(model), opt.state(), epoch
        if on_epoch is not None and on_epoch(epoch, model) is False:
            break
        if early_stop(val_hist, config.patience):
            break
    epochs_run = len(train_hist)
    model.load_arrays(best_state)
    cfg = dict(header, train_config=config.to_dict(), epoch=best_epoch, best_val=best,
               epochs_run=epochs_run)
    ckpt = Checkpoint(best_state, best_opt, cfg)
    return TrainResult(model, ckpt, train_hist, val_hist, epochs_run)


def train_stage1(train: RecipeDataset, val: RecipeDataset, kind, model_config: ModelConfig,
                 config: TrainConfig, header: dict | None = None, on_epoch=None) -> TrainResult:
    """Fit the image encoder and an ingredient decoder; keep the best-validation weights."""
    kind = ModelKind(kind)
    model = build_ingredient_model(model_config, kind, seed=config.seed)
    head = dict(header or {}, stage=1, kind=kind.value, model_config=model_config.to_dict())

    def batch_loss(batch, rng):
        return model.loss(batch.features, batch.ingredients, rng)

    return _fit(model, train, batch_loss, lambda: ingredient_loss(model, val), config, head, on_epoch)


def load_ingredient_model(ckpt: Checkpoint) -> IngredientModel:
    cfg = ModelConfig.from_dict(ckpt.config["model_config"])
    model = build_ingredient_model(cfg, ckpt.config["kind"])
    model.load_arrays(ckpt.params)
    return model.eval()


def _check_compatible(stage1: Checkpoint, model_config: ModelConfig) -> None:
    old = stage1.config.get("model_config", {})
    for key in ("d_model", "feature_dim", "n_positions", "n_ingredients"):
        if old.get(key) != getattr(model_config, key):
            raise ValueError(
                f"stage-1 checkpoint has {key}={old.get(key)}, recipe model expects {getattr(model_config, key)}")


def train_stage2(train: RecipeDataset, val: RecipeDataset, stage1: Checkpoint | None,
                 model_config: ModelConfig, config: TrainConfig, variant=Variant.FULL,
                 strategy: FusionStrategy = FusionStrategy.CONCATENATED, header: dict | None = None,
                 on_epoch=None) -> TrainResult:
    """Fit ingredient embeddings and the instruction decoder with the image encoder frozen.

    Ground-truth ingredients condition the decoder during training.
    """
    model = RecipeModel(model_config, variant, strategy, seed=config.seed)
    if model.uses_image:
        if stage1 is None:
            raise ValueError("a recipe model that sees images needs a stage-1 checkpoint")
        _check_compatible(stage1, model_config)
        model.encoder.load_arrays(stage1.params, prefix="encoder.")
        model.encoder.freeze()
    head = dict(header or {}, stage=2, variant=Variant(variant).value,
                strategy=FusionStrategy(model.strategy).value, model_config=model_config.to_dict())

    def batch_loss(batch, rng):
        return model.nll(batch.features, batch.ingredients, batch.tokens)

    return _fit(model, train, batch_loss, lambda: math.log(recipe_perplexity(model, val)),
                config, head, on_epoch)


def load_recipe_model(ckpt: Checkpoint) -> RecipeModel:
    cfg = ModelConfig.from_dict(ckpt.config["model_config"])
    model = RecipeModel(cfg, ckpt.config["variant"], ckpt.config["strategy"])
    model.load_arrays(ckpt.params)
    return model.eval()
