"""Transformer building blocks, conditioning fusion and the image encoder."""

from __future__ import annotations

import dataclasses
import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 4
    head_dim: int = 16
    dropout: float = 0.1
    max_ingredients: int = 10
    max_instruction_words: int = 150
    n_ingredients: int = 30
    n_words: int = 100
    n_positions: int = 16
    feature_dim: int = 64
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError(
                f"n_heads * head_dim = {self.n_heads * self.head_dim} must equal d_model = {self.d_model}"
            )
        if self.max_ingredients < 1:
            raise ConfigError("max_ingredients must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items() if k in {f.name for f in dataclasses.fields(cls)}})


# Published sizes: ResNet-50 last conv map at 224px is 7x7x2048.
FULL_SCALE_INSTRUCTION_DECODER = dict(d_model=512, n_blocks=16, n_heads=8, head_dim=64, dropout=0.3,
                                 max_ingredients=20, max_instruction_words=150,
                                 n_ingredients=1488, n_words=23231, n_positions=49,
                                 feature_dim=2048)
FULL_SCALE_INGREDIENT_DECODER = dict(d_model=512, n_blocks=4, n_heads=2, head_dim=256, dropout=0.3,
                                max_ingredients=20, max_instruction_words=150,
                                n_ingredients=1488, n_words=23231, n_positions=49,
                                feature_dim=2048)


def full_scale_config(which: str = "instruction") -> ModelConfig:
    preset = FULL_SCALE_INSTRUCTION_DECODER if which == "instruction" else FULL_SCALE_INGREDIENT_DECODER
    return ModelConfig(**preset)


def desk_config(**overrides) -> ModelConfig:
    base = dict(d_model=64, n_blocks=2, n_heads=4, head_dim=16)
    base.update(overrides)
    return ModelConfig(**base)


class FusionStrategy(str, enum.Enum):
    CONCATENATED = "concat"
    INDEPENDENT = "independent"
    SEQUENTIAL_IMAGE_FIRST = "seq-img"
    SEQUENTIAL_INGREDIENTS_FIRST = "seq-ingr"
    SINGLE_CONDITION = "single"


@dataclass
class ImageFeatures:
    features: Tensor  # (P, d) or (B, P, d)
    provenance: str = "synthetic"

    def __post_init__(self):
        if self.provenance not in ("synthetic", "encoded", "precomputed-file"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def validate(self, config: ModelConfig, dim: int | None = None) -> "ImageFeatures":
        dim = config.feature_dim if dim is None else dim
        p, d = self.features.shape[-2:]
        if p != config.n_positions or d != dim:
            raise ValueError(f"image features {p}x{d} do not match config {config.n_positions}x{dim}")
        return self


# -- modules ---------------------------------------------------------------

class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters().items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing parameter {key}")
            if arrays[key].shape != p.shape:
                raise ValueError(f"parameter {key}: shape {arrays[key].shape} != {p.shape}")
            p.data = np.array(arrays[key], dtype=p.dtype)


class DropoutRNG:
    """Shared seeded generator so dropout masks are reproducible per model."""

    def __init__(self, seed: int = 0):
        self.gen = np.random.default_rng(seed)

    def reseed(self, seed: int) -> None:
        self.gen = np.random.default_rng(seed)


class Dropout(Module):
    def __init__(self, p: float, rng: DropoutRNG):
        self.p = p
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.p, self.rng.gen, self.training)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        limit = np.sqrt(6.0 / (d_in + d_out))
        self.weight = T.parameter(rng.uniform(-limit, limit, (d_in, d_out)))
        self.bias = T.parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = T.parameter(np.ones(d))
        self.bias = T.parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator):
        self.weight = T.parameter(rng.normal(0.0, d ** -0.5, (n, d)))

    def __call__(self, ids) -> Tensor:
        return T.embedding(self.weight, ids)


def causal_mask(t: int) -> np.ndarray:
    """Boolean (t, t) mask; True where query i may attend to key j (j <= i)."""
    if t < 1:
        raise ValueError("causal_mask needs t >= 1")
    return np.tril(np.ones((t, t), dtype=bool))


def positional_encoding(t: int, d_model: int, max_len: int | None = None) -> np.ndarray:
    """Sinusoidal encodings, rows = positions."""
    if max_len is not None and t > max_len:
        raise ValueError(f"sequence length {t} exceeds maximum {max_len}")
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(d_model // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / d_model)
    pe = np.zeros((t, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model - d_model // 2])
    return pe.astype(T.get_default_dtype())


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, head_dim: int, rng: np.random.Generator):
        width = n_heads * head_dim
        if width % n_heads:
            raise ConfigError("attention width not divisible by heads")
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.q = Linear(d_model, width, rng)
        self.k = Linear(d_model, width, rng)
        self.v = Linear(d_model, width, rng)
        self.o = Linear(width, d_model, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, queries: Tensor, keys_values: Tensor, attend_mask=None) -> Tensor:
        """``attend_mask`` is boolean, True = may attend, broadcastable to (B, Tq, Tk)."""
        b, tq, _ = queries.shape
        tk = keys_values.shape[1]
        if tk == 0:
            raise ValueError("attention over zero key positions")
        q = self._split(self.q(queries))
        k = self._split(self.k(keys_values))
        v = self._split(self.v(keys_values))
        scores = T.matmul(q, T.swap_last(k)) * (1.0 / np.sqrt(self.head_dim))
        if attend_mask is not None:
            mask = np.asarray(attend_mask, dtype=bool)
            try:
                mask = np.broadcast_to(mask, (b, tq, tk))
            except ValueError:
                raise T.DimensionError(
                    f"attention mask {np.shape(attend_mask)} does not broadcast to {(b, tq, tk)}"
                ) from None
            if not mask.all():
                scores = T.masked_fill(scores, ~mask[:, None, :, :], -np.inf)
        probs = T.softmax(scores, axis=-1)
        ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, tq, self.n_heads * self.head_dim)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, dropout: float, rng: np.random.Generator,
                 drop_rng: DropoutRNG):
        self.fc1 = Linear(d_model, hidden, rng)
        self.fc2 = Linear(hidden, d_model, rng)
        self.drop = Dropout(dropout, drop_rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(T.relu(self.fc1(x))))


@dataclass
class Condition:
    """A batch of conditioning rows with a per-row validity mask."""

    values: Tensor  # (B, n, d)
    mask: np.ndarray | None = None  # (B, n) bool, True = real row

    @property
    def positions(self) -> int:
        return self.values.shape[1]

    def key_mask(self) -> np.ndarray | None:
        if self.mask is None:
            return None
        return self.mask[:, None, :]


def concat_conditions(a: Condition, b: Condition) -> Condition:
    values = T.concat([a.values, b.values], axis=1)
    if a.mask is None and b.mask is None:
        return Condition(values, None)
    bsz = a.values.shape[0]
    ma = a.mask if a.mask is not None else np.ones((bsz, a.positions), dtype=bool)
    mb = b.mask if b.mask is not None else np.ones((bsz, b.positions), dtype=bool)
    return Condition(values, np.concatenate([ma, mb], axis=1))


class TransformerBlock(Module):
    """Pre-norm block: self-attention, conditioning attention, position-wise MLP."""

    def __init__(self, config: ModelConfig, strategy: FusionStrategy, rng: np.random.Generator,
                 drop_rng: DropoutRNG):
        self.strategy = FusionStrategy(strategy)
        c = config
        self.ln_self = LayerNorm(c.d_model, c.ln_eps)
        self.self_attn = MultiHeadAttention(c.d_model, c.n_heads, c.head_dim, rng)
        self.ln_cond = LayerNorm(c.d_model, c.ln_eps)
        if self.strategy in (FusionStrategy.CONCATENATED, FusionStrategy.SINGLE_CONDITION):
            self.cond_attn = MultiHeadAttention(c.d_model, c.n_heads, c.head_dim, rng)
        else:
            self.img_attn = MultiHeadAttention(c.d_model, c.n_heads, c.head_dim, rng)
            self.ingr_attn = MultiHeadAttention(c.d_model, c.n_heads, c.head_dim, rng)
        self.ln_ff = LayerNorm(c.d_model, c.ln_eps)
        self.ff = FeedForward(c.d_model, c.ffn_mult * c.d_model, c.dropout, rng, drop_rng)
        self.drop = Dropout(c.dropout, drop_rng)

    def condition(self, h: Tensor, image: Condition | None, ingr: Condition | None) -> Tensor:
        s = self.strategy
        if s is FusionStrategy.SINGLE_CONDITION:
            if (image is None) == (ingr is None):
                raise ConfigError("single-condition block needs exactly one condition")
            cond = image if image is not None else ingr
            return self.cond_attn(h, cond.values, cond.key_mask())
        if image is None or ingr is None:
            raise ConfigError(f"{s.value} fusion needs both image and ingredient conditions")
        if s is FusionStrategy.CONCATENATED:
            both = concat_conditions(image, ingr)
            return self.cond_attn(h, both.values, both.key_mask())
        if s is FusionStrategy.INDEPENDENT:
            return (self.img_attn(h, image.values, image.key_mask())
                    + self.ingr_attn(h, ingr.values, ingr.key_mask()))
        if s is FusionStrategy.SEQUENTIAL_IMAGE_FIRST:
            mid = self.img_attn(h, image.values, image.key_mask())
            return self.ingr_attn(mid, ingr.values, ingr.key_mask())
        mid = self.ingr_attn(h, ingr.values, ingr.key_mask())
        return self.img_attn(mid, image.values, image.key_mask())

    def __call__(self, x: Tensor, image: Condition | None, ingr: Condition | None,
                 self_mask=None) -> Tensor:
        h = self.ln_self(x)
        x = x + self.drop(self.self_attn(h, h, self_mask))
        x = x + self.drop(self.condition(self.ln_cond(x), image, ingr))
        return x + self.drop(self.ff(self.ln_ff(x)))


class TransformerDecoder(Module):
    """Token embedding + sinusoidal positions + blocks + final norm + output layer."""

    def __init__(self, config: ModelConfig, n_inputs: int, n_outputs: int,
                 strategy: FusionStrategy, rng: np.random.Generator, drop_rng: DropoutRNG,
                 max_len: int):
        self.config = config
        self.max_len = max_len
        self.embed = Embedding(n_inputs, config.d_model, rng)
        self.blocks = [TransformerBlock(config, strategy, rng, drop_rng)
                       for _ in range(config.n_blocks)]
        self.ln_out = LayerNorm(config.d_model, config.ln_eps)
        self.out = Linear(config.d_model, n_outputs, rng)
        self.drop = Dropout(config.dropout, drop_rng)

    def hidden(self, ids: np.ndarray, image: Condition | None, ingr: Condition | None,
               pad_mask: np.ndarray | None = None) -> Tensor:
        ids = np.asarray(ids)
        b, t = ids.shape
        pe = positional_encoding(t, self.config.d_model, self.max_len)
        x = self.embed(ids) * np.sqrt(self.config.d_model) + Tensor(pe, dtype=self.embed.weight.dtype)
        x = self.drop(x)
        mask = causal_mask(t)[None]
        for block in self.blocks:
            x = block(x, image, ingr, mask)
        return self.ln_out(x)

    def __call__(self, ids, image: Condition | None, ingr: Condition | None) -> Tensor:
        return self.out(self.hidden(ids, image, ingr))


# -- image encoder -------------------------------------------------------

class ConvEncoder(Module):
    """Three stride-2 3x3 convolutions; a 32x32 grid gives a 4x4 map (P = 16)."""

    def __init__(self, in_channels: int, out_dim: int, rng: np.random.Generator,
                 widths: tuple[int, int] = (16, 32)):
        chans = [in_channels, widths[0], widths[1], out_dim]
        self.kernels = [Linear(chans[i] * 9, chans[i + 1], rng) for i in range(3)]

    def __call__(self, images: Tensor) -> Tensor:
        x = images
        b = x.shape[0]
        for i, conv in enumerate(self.kernels):
            h, w = x.shape[2], x.shape[3]
            patches = T.unfold2d(x, kernel=3, stride=2, padding=1)
            y = conv(patches)  # (B, P, C_out)
            if i < 2:
                y = T.relu(y)
            ho, wo = (h + 1) // 2, (w + 1) // 2
            x = y.transpose(0, 2, 1).reshape(b, y.shape[2], ho, wo)
        return x.reshape(b, x.shape[1], -1).transpose(0, 2, 1)


class ImageEncoder(Module):
    """Trainable image branch: optional conv backbone, then a projection to d_model."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, drop_rng: DropoutRNG,
                 image_channels: int | None = None):
        self.backbone = (ConvEncoder(image_channels, config.feature_dim, rng)
                         if image_channels else None)
        self.proj = Linear(config.feature_dim, config.d_model, rng)
        self.drop = Dropout(config.dropout, drop_rng)

    def __call__(self, inputs) -> Tensor:
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        if self.backbone is not None and x.ndim == 4:
            x = self.backbone(x)
        return self.drop(self.proj(x))


FEATURE_MAGIC = b"ICFT"
FEATURE_VERSION = 1


def write_features(path, features: np.ndarray) -> None:
    arr = np.asarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"feature file holds a P x d matrix, got shape {arr.shape}")
    p, d = arr.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<HII", FEATURE_VERSION, p, d))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 14 or raw[:4] != FEATURE_MAGIC:
        raise ValueError(f"{path}: not a feature file")
    version, p, d = struct.unpack("<HII", raw[4:14])
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature file version {version}")
    body = raw[14:]
    if len(body) != 4 * p * d:
        raise ValueError(f"{path}: expected {p * d} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(p, d).copy()


def encode_image(source, config: ModelConfig, backbone: ConvEncoder | None = None) -> ImageFeatures:
    """Raw image features: a feature file passes through, an image grid goes through ``backbone``."""
    if isinstance(source, (str, Path)):
        arr = read_features(source)
        return ImageFeatures(Tensor(arr), "precomputed-file").validate(config)
    arr = np.asarray(source.data if isinstance(source, Tensor) else source)
    if arr.ndim == 2:
        return ImageFeatures(Tensor(arr), "synthetic").validate(config)
    if arr.ndim != 3:
        raise ValueError(f"image grid must be (C, H, W), got shape {arr.shape}")
    if backbone is None:
        raise ValueError("encoding an image grid needs a conv backbone")
    feats = backbone(Tensor(arr[None]))
    return ImageFeatures(feats.reshape(feats.shape[1], feats.shape[2]), "encoded").validate(config)
