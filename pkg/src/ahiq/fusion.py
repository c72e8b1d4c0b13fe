"""Reference-guided feature fusion.

The reference image's transformer features predict a per-location offset
field (1x1 conv, zero-initialized, bilinearly upsampled to the CNN feature
grid).  A deformable convolution steers the shallow CNN features along those
offsets, a stack of stride-2 convolutions aligns them to the transformer
grid, and the two branches are fused per pair as the channel concatenation
[dis, ref, dis - ref] followed by two 3x3 convolutions.

Strategies mirror the fusion-ablation rows: ``deform+concat`` (full path),
``concat-only`` (no deformable step), ``vit-only`` and ``cnn-only`` (single
branch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import GeometryError, Tensor

STRATEGIES = ("deform+concat", "concat-only", "vit-only", "cnn-only")


@dataclass(frozen=True)
class FusionConfig:
    vit_channels: int
    cnn_channels: int
    grid: int  # transformer-side spatial extent p
    cnn_extent: int  # CNN-side spatial extent (56 for 224 inputs)
    deform_kernel: int = 3
    mix_channels: int = 64
    strategy: str = "deform+concat"
    per_image_offsets: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown fusion strategy {self.strategy!r}")
        if self.deform_kernel % 2 != 1:
            raise ValueError("deform kernel must be odd")
        if self.cnn_extent % self.grid != 0 or self.reduce_factor not in (2, 4):
            raise GeometryError(
                f"CNN extent {self.cnn_extent} not reducible to grid {self.grid}"
            )

    @property
    def reduce_factor(self) -> int:
        return self.cnn_extent // self.grid

    @property
    def offset_channels(self) -> int:
        return 2 * self.deform_kernel * self.deform_kernel

    @property
    def pair_channels(self) -> int:
        if self.strategy == "vit-only":
            return self.vit_channels
        if self.strategy == "cnn-only":
            return self.cnn_channels
        return self.vit_channels + self.cnn_channels

    @property
    def fused_channels(self) -> int:
        return 3 * self.pair_channels

    @property
    def uses_vit(self) -> bool:
        return self.strategy != "cnn-only"

    @property
    def uses_cnn(self) -> bool:
        return self.strategy != "vit-only"

    @property
    def uses_deform(self) -> bool:
        return self.strategy == "deform+concat"


def _zero_conv(in_ch: int, out_ch: int, kernel: int, rng) -> nn.Conv2d:
    conv = nn.Conv2d(in_ch, out_ch, kernel, rng)
    conv.weight.data[:] = 0.0
    conv.bias.data[:] = 0.0
    return conv


class FusionModule(nn.Module):
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c_cnn, k = cfg.cnn_channels, cfg.deform_kernel
        if cfg.uses_deform:
            # zero init: training starts from a plain convolution
            self.offset_conv = _zero_conv(cfg.vit_channels, cfg.offset_channels, 1, rng)
            self.deform = nn.Conv2d(c_cnn, c_cnn, k, rng, padding=(k - 1) // 2)
        if cfg.uses_cnn:
            steps = []
            for _ in range(cfg.reduce_factor.bit_length() - 1):  # one conv per factor of 2
                steps.append(nn.Conv2d(c_cnn, c_cnn, 3, rng, stride=2))
            self.proj = nn.ModuleList(steps)
        self.mix1 = nn.Conv2d(cfg.fused_channels, cfg.mix_channels, 3, rng, padding=1)
        self.mix2 = nn.Conv2d(cfg.mix_channels, cfg.mix_channels, 3, rng, padding=1)

    # -- offset path -----------------------------------------------------
    def predict_offsets(self, vit_ref: Tensor) -> Tensor:
        """Reference ViT features -> (N, 2K^2, 4p, 4p) offset field."""
        cfg = self.cfg
        if vit_ref.shape[2:] != (cfg.grid, cfg.grid):
            raise GeometryError(
                f"offset predictor expects {cfg.grid}x{cfg.grid} features, got {vit_ref.shape}"
            )
        coarse = self.offset_conv(vit_ref)
        return T.upsample_bilinear(coarse, cfg.reduce_factor)

    def apply_deform(self, cnn_feats: Tensor, offsets: Tensor) -> Tensor:
        return T.deform_conv2d(cnn_feats, offsets, self.deform.weight, self.deform.bias)

    # -- alignment and fusion ---------------------------------------------
    def project_cnn(self, cnn_feats: Tensor) -> Tensor:
        """Stride-2 conv stack reducing 4p x 4p (or 2p x 2p) down to p x p."""
        cfg = self.cfg
        expected = cfg.grid * cfg.reduce_factor
        if cnn_feats.shape[2] % cfg.reduce_factor != 0 or cnn_feats.shape[2] != expected:
            raise GeometryError(
                f"project_cnn expects extent {expected}, got {cnn_feats.shape[2]}"
            )
        out = cnn_feats
        for i, conv in enumerate(self.proj):
            if i > 0:
                out = T.relu(out)
            # floor-mode stride-2 halving on even extents: pad top/left only
            out = conv(T.pad2d(out, (1, 0, 1, 0)))
        return out

    def pair_features(self, vit_feats, cnn_feats) -> Tensor:
        """Per-image concat of the two branches (or the single active one)."""
        if self.cfg.strategy == "vit-only":
            return vit_feats
        if self.cfg.strategy == "cnn-only":
            return cnn_feats
        return T.concat([vit_feats, cnn_feats], axis=1)

    def fuse_pair(self, pair_dis: Tensor, pair_ref: Tensor) -> Tensor:
        """Concat [dis, ref, dis - ref] and mix with two 3x3 convolutions."""
        if pair_dis.shape != pair_ref.shape:
            raise GeometryError(
                f"fusion pair shapes differ: {pair_dis.shape} vs {pair_ref.shape}"
            )
        fused = T.concat([pair_dis, pair_ref, pair_dis - pair_ref], axis=1)
        return self.mix2(T.relu(self.mix1(fused)))
