import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invcook import tensor as T
from invcook.ingredients import (ModelKind, build_ingredient_model, dc_sample, eos_targets,
                                 ff_iou_loss, ff_td_loss, multi_hot, pool_over_time, td_sample,
                                 tf_set_loss, tf_set_loss_terms, threshold_sample, validate_list)
from invcook.nn import ModelConfig
from invcook.tensor import Tensor


def cfg(**kw):
    base = dict(d_model=8, n_blocks=1, n_heads=2, head_dim=4, dropout=0.0, n_positions=3,
                feature_dim=5, n_ingredients=7, max_ingredients=4)
    base.update(kw)
    return ModelConfig(**base)


def test_eos_targets_unit_step():
    np.testing.assert_array_equal(eos_targets([2, 0, 4], 4),
                                  [[0, 0, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0]])
    with pytest.raises(ValueError):
        eos_targets([5], 4)


def test_pool_over_time_respects_step_mask(f64):
    probs = Tensor(np.array([[[0.1, 0.7], [0.9, 0.2], [0.95, 0.99]]]))
    pooled = pool_over_time(probs, np.array([[True, True, False]]))
    np.testing.assert_allclose(pooled.data, [[0.9, 0.7]])


def test_tf_set_loss_hand_value(f64):
    pooled = Tensor(np.array([[0.8, 0.3]]))
    eos = Tensor(np.array([[0.0, 0.0]]))
    gt = np.array([[1.0, 0.0]])
    eps = 0.1
    t = np.array([0.95, 0.05])
    ingr = -np.mean(t * np.log([0.8, 0.3]) + (1 - t) * np.log([0.2, 0.7]))
    eos_term = np.log(2.0)  # z = 0 for every target
    card = abs(1.1 - 1.0)
    terms = tf_set_loss_terms(pooled, eos, gt, eps)
    assert terms["ingr"].data == pytest.approx(ingr, abs=1e-12)
    assert terms["eos"].data == pytest.approx(eos_term, abs=1e-12)
    assert terms["card"].data == pytest.approx(card, abs=1e-12)
    total = tf_set_loss(pooled, eos, gt)
    assert total.data == pytest.approx(1000 * ingr + eos_term + card, abs=1e-9)


def test_td_loss_targets_normalized_set(f64):
    logits = Tensor(np.zeros((1, 4)))
    # uniform prediction against (1/2, 1/2, 0, 0) costs ln 4
    assert ff_td_loss(logits, np.array([[1, 1, 0, 0]])).data == pytest.approx(np.log(4))
    with pytest.raises(ValueError):
        ff_td_loss(logits, np.zeros((1, 4)))


def test_iou_loss_perfect_prediction_is_near_zero(f64):
    logits = Tensor(np.array([[40.0, -40.0, 40.0]]))
    assert ff_iou_loss(logits, np.array([[1, 0, 1]])).data == pytest.approx(0.0, abs=1e-12)


def test_td_sample_examples():
    assert td_sample(np.array([0.6, 0.3, 0.1])) == [0]
    # cumulative exactly 0.5 is not enough
    assert td_sample(np.array([0.5, 0.25, 0.25])) == [0, 1]
    assert td_sample(np.array([0.25, 0.25, 0.25, 0.25])) == [0, 1, 2]


def test_dc_sample_examples():
    probs = np.array([0.1, 0.9, 0.5, 0.7])
    assert dc_sample(probs, np.log([0.1, 0.1, 0.8, 0.0 + 1e-9, 1e-9])) == [1, 3]
    assert dc_sample(probs, np.array([5.0, 0, 0])) == []


def test_threshold_sample_is_strict():
    assert threshold_sample(np.array([0.5, 0.51, 0.2])) == [1]


def test_validate_list_rejects_repeats_and_range():
    with pytest.raises(ValueError):
        validate_list([1, 1], 5)
    with pytest.raises(ValueError):
        validate_list([5], 5)
    with pytest.raises(ValueError):
        multi_hot([[0, 0]], 3)


@pytest.mark.parametrize("kind", [k.value for k in ModelKind])
def test_every_model_trains_and_predicts(f64, kind):
    c = cfg()
    model = build_ingredient_model(c, kind, seed=0)
    feats = np.random.default_rng(0).normal(size=(4, 3, 5))
    gt = [[0, 2], [1], [3, 4, 5, 6], [6, 0]]
    loss = model.loss(feats, gt, np.random.default_rng(1))
    grads = T.backward(loss, model.named_parameters())
    assert np.isfinite(float(loss.data))
    assert any(np.abs(g).sum() > 0 for g in grads.values())
    model.eval()
    for pred in model.predict(feats):
        assert len(set(pred.ids)) == len(pred.ids)
        if kind.startswith("tf") or kind == "ff-dc":
            assert len(pred.ids) <= c.max_ingredients
        assert sorted(pred.ranked) == list(range(c.n_ingredients))
        assert all(0 <= i < c.n_ingredients for i in pred.ids)


def test_set_forward_matches_stepwise_decode(f64):
    model = build_ingredient_model(cfg(), "tf-set", seed=3).eval()
    feats = np.random.default_rng(2).normal(size=(3, 3, 5))
    with T.no_grad():
        ingr, eos, selected = model.set_forward(feats)
        image = model.image_features(feats)
    ids, raw = model.greedy_decode(image, 4)
    np.testing.assert_array_equal(ids, selected)
    np.testing.assert_allclose(eos.data, raw[:, :, -1], atol=1e-12)
    finite = np.isfinite(ingr.data)
    np.testing.assert_allclose(ingr.data[finite], raw[:, :, :-1][finite], atol=1e-12)


def test_set_model_rejects_oversized_sets(f64):
    model = build_ingredient_model(cfg(), "tf-set")
    with pytest.raises(ValueError):
        model.loss(np.zeros((1, 3, 5)), [[0, 1, 2, 3, 4]])


def test_shuffled_list_model_needs_rng(f64):
    model = build_ingredient_model(cfg(), "tf-list-shuffle")
    with pytest.raises(ValueError):
        model.loss(np.zeros((1, 3, 5)), [[0, 1]])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.floats(0.0, 0.99))
def test_td_sample_prefix_is_minimal(weights, threshold):
    p = np.asarray(weights) + 1e-3
    p = p / p.sum()
    chosen = td_sample(p, threshold)
    mass = p[chosen].sum()
    assert mass > threshold or len(chosen) == p.size
    # removing the least probable chosen element drops below the threshold
    if len(chosen) > 1:
        assert mass - p[chosen].min() <= threshold + 1e-12
