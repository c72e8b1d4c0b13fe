"""Patch-wise prediction: a score per feature-map location, a positive
attention weight per score, and their normalized weighted sum.

The spatial-pooling variant (per-channel max + mean through a learned linear
map) and the average of both exist to reproduce the pooling ablation.
"""

from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .tensor import ShapeMismatchError, Tensor

POOLING_MODES = ("patch", "spatial", "patch+spatial")

WEIGHT_FLOOR = 1e-6  # keeps the attention map strictly positive


class PredictionHead(nn.Module):
    def __init__(self, in_channels: int, hidden: int, rng: np.random.Generator,
                 pooling: str = "patch"):
        super().__init__()
        if pooling not in POOLING_MODES:
            raise ValueError(f"unknown pooling mode {pooling!r}")
        self.pooling = pooling
        self.score_conv1 = nn.Conv2d(in_channels, hidden, 3, rng, padding=1)
        self.score_conv2 = nn.Conv2d(hidden, 1, 1, rng)
        self.weight_conv1 = nn.Conv2d(in_channels, hidden, 3, rng, padding=1)
        self.weight_conv2 = nn.Conv2d(hidden, 1, 1, rng)
        if pooling != "patch":
            self.spatial_fc = nn.Linear(2 * in_channels, 1, rng)

    def score_branch(self, feats: Tensor) -> Tensor:
        """(N, C, H, W) -> unbounded (N, 1, H, W) score map."""
        return self.score_conv2(T.relu(self.score_conv1(feats)))

    def weight_branch(self, feats: Tensor) -> Tensor:
        """(N, C, H, W) -> strictly positive (N, 1, H, W) attention map."""
        pre = self.weight_conv2(T.relu(self.weight_conv1(feats)))
        return T.sigmoid(pre) + WEIGHT_FLOOR

    def spatial_pool(self, feats: Tensor) -> Tensor:
        """Per-channel max and mean, jointly weighted to one scalar per item."""
        per_channel_max = T.max_(T.max_(feats, axis=3), axis=2)  # (N, C)
        per_channel_mean = T.mean(feats, axis=(2, 3))
        stacked = T.concat([per_channel_max, per_channel_mean], axis=1)
        return T.reshape(self.spatial_fc(stacked), (feats.shape[0],))

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor | None, Tensor | None]:
        """Returns (scalar scores (N,), score map, attention map)."""
        if self.pooling == "spatial":
            return self.spatial_pool(feats), None, None
        smap = self.score_branch(feats)
        wmap = self.weight_branch(feats)
        pooled = weighted_pool(smap, wmap)
        if self.pooling == "patch+spatial":
            pooled = (pooled + self.spatial_pool(feats)) * 0.5
        return pooled, smap, wmap


def weighted_pool(score_map: Tensor, attn_map: Tensor) -> Tensor:
    """Normalized weighted sum over all locations: sum(s*w) / sum(w), per item."""
    if score_map.shape != attn_map.shape:
        raise ShapeMismatchError(
            f"score map {score_map.shape} vs attention map {attn_map.shape}"
        )
    axes = tuple(range(1, score_map.ndim))
    num = T.sum_(score_map * attn_map, axis=axes)
    den = T.sum_(attn_map, axis=axes)
    return num / den
