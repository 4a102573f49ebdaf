import numpy as np
import pytest

from vitdeit.attention import attention_from_record, attention_map, render_overlay, rollout
from vitdeit.errors import ConfigError, StateError
from vitdeit.vit import TransformerConfig, init_weights

CFG = TransformerConfig(image_size=8, patch_size=2, embed_dim=8, num_heads=2, num_blocks=2,
                        mlp_hidden_dim=8, num_classes=3)


def random_attention(rng, blocks, heads, tokens):
    a = rng.uniform(size=(blocks, heads, tokens, tokens))
    return list(a / a.sum(axis=-1, keepdims=True))


def test_map_contract():
    w = init_weights(CFG, seed=0)
    img = np.random.default_rng(0).uniform(size=(8, 8, 3))
    for method in ("last-layer", "rollout"):
        amap = attention_map(CFG, w, img, method)
        assert amap.grid.shape == (4, 4) and amap.method == method
        assert amap.grid.min() == 0.0 and amap.grid.max() == 1.0
    with pytest.raises(ConfigError):
        attention_map(CFG, w, img, "bogus")
    with pytest.raises(ConfigError):
        attention_map(CFG, w, img[None])


def test_uniform_attention_gives_flat_map():
    t = CFG.num_tokens
    uniform = [np.full((2, t, t), 1.0 / t)]
    amap = attention_from_record(uniform, CFG)
    assert np.all(amap.raw == amap.raw[0, 0])
    assert np.all(amap.grid == 0.0)


def test_rollout_matches_explicit_product():
    rng = np.random.default_rng(1)
    att = random_attention(rng, 2, 3, 5)
    mixed = []
    for block in att:
        a = 0.5 * np.eye(5) + 0.5 * block.mean(axis=0)
        mixed.append(a / a.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(rollout(att), mixed[1] @ mixed[0], atol=1e-15)


def test_head_order_does_not_matter():
    rng = np.random.default_rng(2)
    att = random_attention(rng, 2, 2, CFG.num_tokens)
    flipped = [a[::-1] for a in att]
    for method in ("last-layer", "rollout"):
        np.testing.assert_allclose(attention_from_record(att, CFG, method).grid,
                                   attention_from_record(flipped, CFG, method).grid, atol=1e-15)


def test_missing_capture():
    with pytest.raises(StateError):
        attention_from_record([], CFG)


def test_overlay():
    img = np.random.default_rng(3).uniform(size=(8, 8, 3))
    amap = attention_map(CFG, init_weights(CFG, seed=1), img)
    out = render_overlay(img, amap)
    assert out.shape == (8, 8, 3) and out.dtype == np.uint8
