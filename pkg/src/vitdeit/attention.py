"""Class-token attention maps over the patch grid."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .imaging import resize_bilinear, to_uint8
from .vit import forward

METHODS = ("last-layer", "rollout")


@dataclass
class AttentionMap:
    grid: np.ndarray  # (grid, grid), min-max normalised to [0, 1]
    raw: np.ndarray  # same layout, before normalisation
    method: str
    head_combination: str = "mean over heads"


def head_mean(block_attention):
    """(heads, T, T) -> (T, T); symmetric in head order."""
    return np.asarray(block_attention, dtype=float).mean(axis=0)


def rollout(attention, residual_weight=0.5):
    """Product over blocks of identity-mixed, row-renormalised, head-averaged attention.

    Later blocks multiply on the left: R = A_L ... A_1.
    """
    result = None
    for block in attention:
        a = head_mean(block)
        a = residual_weight * np.eye(a.shape[0]) + (1.0 - residual_weight) * a
        a = a / a.sum(axis=-1, keepdims=True)
        result = a if result is None else a @ result
    return result


def attention_from_record(attention, config, method="last-layer"):
    """Build the map from captured per-block attention of a single image."""
    if not attention:
        raise StateError("no attention was captured for this forward pass")
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    if method == "last-layer":
        matrix = head_mean(attention[-1])
    else:
        matrix = rollout(attention)
    row = matrix[0, config.num_prefix_tokens:]
    raw = row.reshape(config.grid_size, config.grid_size)
    lo, hi = raw.min(), raw.max()
    grid = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
    return AttentionMap(grid, raw, method)


def attention_map(config, weights, image, method="last-layer"):
    if np.ndim(image) != 3:
        raise ConfigError("attention_map takes a single (H, W, C) image")
    out = forward(image, config, weights)
    return attention_from_record(out.attention, config, method)


def render_overlay(image, amap, alpha=0.5):
    """Blend a red heat layer (bilinear-upsampled map) over the image; returns uint8 RGB."""
    image = np.asarray(image, dtype=float)
    h, w = image.shape[:2]
    heat = resize_bilinear(amap.grid, h, w)
    layer = np.stack([heat, 0.15 * heat, 0.1 * (1 - heat)], axis=-1)
    return to_uint8((1 - alpha) * image[..., :3] + alpha * layer)
