"""Two-branch feature extraction: an early-block-tapped vision transformer
and the first residual stage of a bottleneck CNN.

The ViT branch embeds non-overlapping patches (plus a class token and learned
positional embeddings), runs pre-norm attention/FFN blocks, and reshapes the
patch tokens of each tapped block into a p x p map, concatenated on channels.
The CNN branch is a 7x7/stride-2 stem with max-pooling followed by three
bottleneck blocks whose outputs are concatenated, giving 4p x 4p maps at the
patch-16 geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import GeometryError, Tensor

IMAGE_SIZE = 224


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 16
    depth: int = 5
    width: int = 64
    heads: int = 4
    tapped_blocks: tuple[int, ...] = (0, 1, 2, 3, 4)
    ffn_ratio: int = 4
    ln_eps: float = 1e-6

    def __post_init__(self):
        if IMAGE_SIZE % self.patch_size != 0:
            raise GeometryError(f"patch size {self.patch_size} does not tile {IMAGE_SIZE}")
        if self.grid not in (14, 28):
            raise GeometryError(f"token grid {self.grid} unsupported (need 14 or 28)")
        if not self.tapped_blocks:
            raise ValueError("tapped_blocks must not be empty")
        if max(self.tapped_blocks) >= self.depth:
            raise ValueError(
                f"tapped block {max(self.tapped_blocks)} out of range for depth {self.depth}"
            )
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def grid(self) -> int:
        return IMAGE_SIZE // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid + 1

    @property
    def out_channels(self) -> int:
        return len(self.tapped_blocks) * self.width


@dataclass(frozen=True)
class CNNConfig:
    stem_channels: int = 8
    mid_channels: int = 8
    out_channels: int = 32
    blocks: int = 3
    tapped_layers: tuple[int, ...] = (0, 1, 2)
    bn_eps: float = 1e-5

    def __post_init__(self):
        if max(self.tapped_layers) >= self.blocks:
            raise ValueError("tapped layer out of range")

    @property
    def feature_channels(self) -> int:
        return len(self.tapped_layers) * self.out_channels

    @property
    def feature_extent(self) -> int:
        return IMAGE_SIZE // 4  # stride-2 stem conv + stride-2 pool


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + pre-norm FFN, both with residuals."""

    def __init__(self, width: int, heads: int, ffn_ratio: int, ln_eps: float, rng):
        super().__init__()
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        self.ln1 = nn.LayerNorm(width, eps=ln_eps)
        self.qkv = nn.Linear(width, 3 * width, rng)
        self.out = nn.Linear(width, width, rng)
        self.ln2 = nn.LayerNorm(width, eps=ln_eps)
        self.fc1 = nn.Linear(width, ffn_ratio * width, rng)
        self.fc2 = nn.Linear(ffn_ratio * width, width, rng)

    def attention(self, tokens: Tensor) -> tuple[Tensor, Tensor]:
        n, l, c = tokens.shape
        h, d = self.heads, self.head_dim
        qkv = self.qkv(self.ln1(tokens))  # (n, l, 3c)
        q = T.transpose(T.reshape(qkv[:, :, 0:c], (n, l, h, d)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(qkv[:, :, c : 2 * c], (n, l, h, d)), (0, 2, 1, 3))
        v = T.transpose(T.reshape(qkv[:, :, 2 * c :], (n, l, h, d)), (0, 2, 1, 3))
        logits = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * float(1.0 / np.sqrt(d))
        attn = T.softmax(logits, axis=-1)  # (n, h, l, l)
        ctx = T.matmul(attn, v)  # (n, h, l, d)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (n, l, c))
        return self.out(ctx), attn

    def __call__(self, tokens: Tensor) -> Tensor:
        attended, _ = self.attention(tokens)
        tokens = tokens + attended
        return tokens + self.fc2(T.gelu(self.fc1(self.ln2(tokens))))


class ViTBackbone(nn.Module):
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        ps, c = cfg.patch_size, cfg.width
        self.patch_proj = nn.Conv2d(3, c, ps, rng, stride=ps)
        self.cls_token = nn.trunc_normal(rng, (1, 1, c))
        self.pos_embed = nn.trunc_normal(rng, (1, cfg.seq_len, c))
        self.blocks = nn.ModuleList(
            TransformerBlock(c, cfg.heads, cfg.ffn_ratio, cfg.ln_eps, rng)
            for _ in range(cfg.depth)
        )

    def patch_embed(self, image: Tensor) -> Tensor:
        """(N, 3, 224, 224) -> (N, p*p + 1, c) token sequence."""
        n = image.shape[0]
        p, c = self.cfg.grid, self.cfg.width
        if image.shape[1:] != (3, IMAGE_SIZE, IMAGE_SIZE):
            raise GeometryError(
                f"expected (N, 3, {IMAGE_SIZE}, {IMAGE_SIZE}) input, got {image.shape}"
            )
        patches = self.patch_proj(image)  # (n, c, p, p)
        tokens = T.transpose(T.reshape(patches, (n, c, p * p)), (0, 2, 1))
        cls = T.broadcast_to(self.cls_token, (n, 1, c))
        return T.concat([cls, tokens], axis=1) + self.pos_embed

    def extract(self, image: Tensor) -> Tensor:
        """Concatenate tapped block outputs as (N, |tapped| * c, p, p) maps,
        dropping the class token before each reshape."""
        cfg = self.cfg
        n = image.shape[0]
        p, c = cfg.grid, cfg.width
        tokens = self.patch_embed(image)
        taps = []
        tapped = set(cfg.tapped_blocks)
        for i in range(max(cfg.tapped_blocks) + 1):
            tokens = self.blocks[i](tokens)
            if i in tapped:
                grid_tokens = tokens[:, 1:, :]  # class token never reaches the map
                taps.append(T.reshape(T.transpose(grid_tokens, (0, 2, 1)), (n, c, p, p)))
        return T.concat(taps, axis=1) if len(taps) > 1 else taps[0]


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand, each with batch norm; ReLU after the sum."""

    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, bn_eps: float, rng):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 1, rng, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_ch, eps=bn_eps)
        self.conv2 = nn.Conv2d(mid_ch, mid_ch, 3, rng, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid_ch, eps=bn_eps)
        self.conv3 = nn.Conv2d(mid_ch, out_ch, 1, rng, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch, eps=bn_eps)
        if in_ch != out_ch:
            self.down = _Downsample(in_ch, out_ch, bn_eps, rng)
        else:
            self.down = None

    def __call__(self, x: Tensor) -> Tensor:
        identity = self.down(x) if self.down is not None else x
        h = T.relu(self.bn1(self.conv1(x)))
        h = T.relu(self.bn2(self.conv2(h)))
        h = self.bn3(self.conv3(h))
        return T.relu(h + identity)


class _Downsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, bn_eps: float, rng):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1, rng, bias=False)
        self.bn = nn.BatchNorm2d(out_ch, eps=bn_eps)

    def __call__(self, x: Tensor) -> Tensor:
        return self.bn(self.conv(x))


class CNNBackbone(nn.Module):
    def __init__(self, cfg: CNNConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.stem = _Stem(cfg.stem_channels, cfg.bn_eps, rng)
        blocks = []
        in_ch = cfg.stem_channels
        for _ in range(cfg.blocks):
            blocks.append(Bottleneck(in_ch, cfg.mid_channels, cfg.out_channels, cfg.bn_eps, rng))
            in_ch = cfg.out_channels
        self.blocks = nn.ModuleList(blocks)

    def extract(self, image: Tensor) -> Tensor:
        """(N, 3, 224, 224) -> (N, |tapped| * out_channels, 56, 56)."""
        x = self.stem(image)
        taps = []
        tapped = set(self.cfg.tapped_layers)
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in tapped:
                taps.append(x)
        return T.concat(taps, axis=1) if len(taps) > 1 else taps[0]


class _Stem(nn.Module):
    """7x7/2 conv + 3x3/2 max-pool; floor-mode geometry (224 -> 112 -> 56)
    is expressed with explicit asymmetric padding."""

    def __init__(self, channels: int, bn_eps: float, rng):
        super().__init__()
        self.conv = nn.Conv2d(3, channels, 7, rng, stride=2, bias=False)
        self.bn = nn.BatchNorm2d(channels, eps=bn_eps)

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn(self.conv(T.pad2d(x, (3, 2, 3, 2)))))
        h = T.pad2d(h, (1, 0, 1, 0), value=float("-inf"))
        return T.maxpool2d(h, 3, 2, 0)
