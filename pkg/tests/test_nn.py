import numpy as np
import pytest

from invcook import tensor as T
from invcook.nn import (Condition, ConfigError, ConvEncoder, DropoutRNG, FusionStrategy, ImageFeatures,
                        ModelConfig, MultiHeadAttention, TransformerBlock, TransformerDecoder,
                        causal_mask, desk_config, encode_image, full_scale_config, positional_encoding,
                        read_features, write_features)
from invcook.tensor import Tensor


def small_config(**kw):
    base = dict(d_model=8, n_blocks=1, n_heads=2, head_dim=4, dropout=0.0, n_positions=3,
                feature_dim=8, n_ingredients=6, n_words=11)
    base.update(kw)
    return ModelConfig(**base)


def test_head_width_must_match_model_width():
    with pytest.raises(ConfigError):
        ModelConfig(d_model=64, n_heads=3, head_dim=16)


def test_presets():
    instr = full_scale_config("instruction")
    assert (instr.n_blocks, instr.n_heads, instr.head_dim, instr.d_model) == (16, 8, 64, 512)
    ingr = full_scale_config("ingredient")
    assert (ingr.n_blocks, ingr.n_heads, ingr.head_dim, ingr.max_ingredients) == (4, 2, 256, 20)
    assert instr.max_instruction_words == 150 and instr.dropout == 0.3
    desk = desk_config()
    assert (desk.d_model, desk.n_blocks) == (64, 2)


def test_causal_mask_is_lower_triangular():
    m = causal_mask(4)
    assert m.dtype == bool
    np.testing.assert_array_equal(m, np.tril(np.ones((4, 4), dtype=bool)))
    with pytest.raises(ValueError):
        causal_mask(0)


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1], atol=1e-7)
    np.testing.assert_allclose(pe[1], [np.sin(1), np.cos(1), np.sin(0.01), np.cos(0.01)], atol=1e-7)
    with pytest.raises(ValueError):
        positional_encoding(5, 4, max_len=4)


def test_attention_mask_blocks_future_tokens(f64, rng):
    attn = MultiHeadAttention(8, 2, 4, rng)
    x = rng.normal(size=(1, 5, 8))
    y = x.copy()
    y[0, 3:] += 10.0  # perturb only the future of position 2
    a = attn(Tensor(x), Tensor(x), causal_mask(5)[None]).data
    b = attn(Tensor(y), Tensor(y), causal_mask(5)[None]).data
    np.testing.assert_allclose(a[:, :3], b[:, :3], atol=1e-12)
    assert not np.allclose(a[:, 3:], b[:, 3:])


def test_attention_mask_shape_error(f64, rng):
    attn = MultiHeadAttention(8, 2, 4, rng)
    x = Tensor(rng.normal(size=(2, 3, 8)))
    with pytest.raises(T.DimensionError):
        attn(x, x, np.ones((4, 4), dtype=bool))


def test_attention_over_zero_keys_raises(f64, rng):
    attn = MultiHeadAttention(8, 2, 4, rng)
    with pytest.raises(ValueError):
        attn(Tensor(rng.normal(size=(1, 2, 8))), Tensor(np.zeros((1, 0, 8))))


def test_padded_condition_rows_are_ignored(f64, rng):
    cfg = small_config()
    block = TransformerBlock(cfg, FusionStrategy.CONCATENATED, rng, DropoutRNG(0)).eval()
    x = Tensor(rng.normal(size=(1, 2, 8)))
    img = Condition(Tensor(rng.normal(size=(1, 3, 8))))
    rows = rng.normal(size=(1, 2, 8))
    padded = np.concatenate([rows, rng.normal(size=(1, 1, 8)) * 50], axis=1)
    a = block(x, img, Condition(Tensor(rows)), causal_mask(2)[None]).data
    b = block(x, img, Condition(Tensor(padded), np.array([[True, True, False]])),
              causal_mask(2)[None]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("strategy", ["concat", "independent", "seq-img", "seq-ingr"])
def test_two_source_strategies_need_both_conditions(f64, rng, strategy):
    block = TransformerBlock(small_config(), strategy, rng, DropoutRNG(0))
    x = Tensor(rng.normal(size=(1, 2, 8)))
    img = Condition(Tensor(rng.normal(size=(1, 3, 8))))
    with pytest.raises(ConfigError):
        block(x, img, None)


def test_sequential_orders_differ(f64):
    cfg = small_config()
    x = Tensor(np.random.default_rng(0).normal(size=(1, 2, 8)))
    img = Condition(Tensor(np.random.default_rng(1).normal(size=(1, 3, 8))))
    ingr = Condition(Tensor(np.random.default_rng(2).normal(size=(1, 2, 8))))
    a = TransformerBlock(cfg, "seq-img", np.random.default_rng(5), DropoutRNG(0)).eval()
    b = TransformerBlock(cfg, "seq-ingr", np.random.default_rng(5), DropoutRNG(0)).eval()
    assert not np.allclose(a(x, img, ingr).data, b(x, img, ingr).data)


def test_decoder_is_causal(f64, rng):
    cfg = small_config(n_blocks=2)
    dec = TransformerDecoder(cfg, 11, 11, "single", rng, DropoutRNG(0), max_len=10).eval()
    img = Condition(Tensor(rng.normal(size=(1, 3, 8))))
    full = dec(np.array([[1, 5, 6, 7]]), img, None).data
    prefix = dec(np.array([[1, 5]]), img, None).data
    np.testing.assert_allclose(full[:, :2], prefix, atol=1e-12)


def test_feature_file_round_trip(tmp_path, rng):
    arr = rng.normal(size=(4, 6)).astype(np.float32)
    path = tmp_path / "x.icft"
    write_features(path, arr)
    raw = path.read_bytes()
    assert raw[:4] == b"ICFT" and len(raw) == 14 + 4 * 24
    np.testing.assert_array_equal(read_features(path), arr)


def test_feature_file_rejects_truncation(tmp_path):
    path = tmp_path / "x.icft"
    write_features(path, np.zeros((2, 2)))
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(ValueError):
        read_features(path)


def test_image_features_validation(tmp_path):
    cfg = small_config()
    write_features(tmp_path / "f.icft", np.zeros((3, 8)))
    feats = encode_image(tmp_path / "f.icft", cfg)
    assert feats.provenance == "precomputed-file"
    with pytest.raises(ValueError):
        ImageFeatures(Tensor(np.zeros((4, 8)))).validate(cfg)
    with pytest.raises(ValueError):
        ImageFeatures(Tensor(np.zeros((3, 8))), provenance="camera")


def test_conv_encoder_grid(f64, rng):
    enc = ConvEncoder(3, 8, rng)
    out = enc(Tensor(rng.normal(size=(2, 3, 32, 32))))
    assert out.shape == (2, 16, 8)
    feats = encode_image(rng.normal(size=(3, 32, 32)), small_config(n_positions=16), enc)
    assert feats.provenance == "encoded" and feats.features.shape == (16, 8)
