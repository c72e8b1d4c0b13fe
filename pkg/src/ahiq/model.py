"""Full network assembly: shared two-branch extraction over the reference and
distorted images, reference-guided fusion, and the patch-wise head.

Checkpoints store every parameter and buffer under ``vit.`` / ``cnn.`` /
``fusion.`` / ``head.`` prefixes plus a ``config.`` echo of the geometry, so
a file alone reconstructs the exact model.  ``full_size_load_list`` declares
the backbone tensors a full-size model loads from externally converted
pretrained weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources as importlib_resources
from typing import Optional

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .backbones import CNNBackbone, CNNConfig, ViTBackbone, ViTConfig
from .fusion import FusionConfig, FusionModule
from .head import PredictionHead
from .nn import Module
from .tensor import Tensor

CONFIG_PREFIX = "config."


@dataclass(frozen=True)
class ModelConfig:
    vit: ViTConfig
    cnn: CNNConfig
    deform_kernel: int = 3
    mix_channels: int = 64
    head_hidden: int = 64
    strategy: str = "deform+concat"
    pooling: str = "patch"
    per_image_offsets: bool = False

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            vit_channels=self.vit.out_channels,
            cnn_channels=self.cnn.feature_channels,
            grid=self.vit.grid,
            cnn_extent=self.cnn.feature_extent,
            deform_kernel=self.deform_kernel,
            mix_channels=self.mix_channels,
            strategy=self.strategy,
            per_image_offsets=self.per_image_offsets,
        )


def toy_b16() -> ModelConfig:
    return ModelConfig(vit=ViTConfig(patch_size=16), cnn=CNNConfig())


def toy_b8() -> ModelConfig:
    return ModelConfig(vit=ViTConfig(patch_size=8), cnn=CNNConfig())


def full_b16() -> ModelConfig:
    return ModelConfig(
        vit=ViTConfig(patch_size=16, depth=12, width=768, heads=12),
        cnn=CNNConfig(stem_channels=64, mid_channels=64, out_channels=256),
        mix_channels=256,
        head_hidden=256,
    )


def full_b8() -> ModelConfig:
    return replace(full_b16(), vit=ViTConfig(patch_size=8, depth=12, width=768, heads=12))


PRESETS = {"toy-b16": toy_b16, "toy-b8": toy_b8, "full-b16": full_b16, "full-b8": full_b8}


@dataclass
class ModelOutput:
    score: Tensor  # (N,)
    score_map: Optional[Tensor]
    attn_map: Optional[Tensor]
    offsets: Optional[Tensor]


class AHIQModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        fusion_cfg = cfg.fusion_config()
        if fusion_cfg.uses_vit:
            self.vit = ViTBackbone(cfg.vit, rng)
        if fusion_cfg.uses_cnn:
            self.cnn = CNNBackbone(cfg.cnn, rng)
        self.fusion = FusionModule(fusion_cfg, rng)
        self.head = PredictionHead(fusion_cfg.mix_channels, cfg.head_hidden, rng, cfg.pooling)

    def forward(self, ref: Tensor, dist: Tensor) -> ModelOutput:
        fcfg = self.fusion.cfg
        vit_ref = vit_dis = None
        if fcfg.uses_vit:
            vit_ref = self.vit.extract(ref)
            vit_dis = self.vit.extract(dist)
        offsets = None
        cnn_ref = cnn_dis = None
        if fcfg.uses_cnn:
            cnn_ref = self.cnn.extract(ref)
            cnn_dis = self.cnn.extract(dist)
            if fcfg.uses_deform:
                # a single reference-derived field steers both images unless
                # per-image offsets are explicitly enabled
                offsets = self.fusion.predict_offsets(vit_ref)
                offsets_dis = (
                    self.fusion.predict_offsets(vit_dis) if fcfg.per_image_offsets else offsets
                )
                cnn_ref = self.fusion.apply_deform(cnn_ref, offsets)
                cnn_dis = self.fusion.apply_deform(cnn_dis, offsets_dis)
            cnn_ref = self.fusion.project_cnn(cnn_ref)
            cnn_dis = self.fusion.project_cnn(cnn_dis)
        pair_ref = self.fusion.pair_features(vit_ref, cnn_ref)
        pair_dis = self.fusion.pair_features(vit_dis, cnn_dis)
        fused = self.fusion.fuse_pair(pair_dis, pair_ref)
        score, smap, wmap = self.head(fused)
        return ModelOutput(score=score, score_map=smap, attn_map=wmap, offsets=offsets)

    def score_pairs(self, ref: np.ndarray, dist: np.ndarray) -> np.ndarray:
        """Inference on normalized (N, 3, 224, 224) arrays -> (N,) scores."""
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                out = self.forward(Tensor(ref.astype(np.float32)), Tensor(dist.astype(np.float32)))
                return out.score.data.copy()
        finally:
            if was_training:
                self.train()

    # -- checkpoint plumbing ----------------------------------------------
    def save(self, path) -> None:
        tensors = {name: t.data for name, t in self.state().items()}
        tensors.update(config_to_tensors(self.cfg))
        ckpt_io.save_checkpoint(tensors, path)

    def load(self, tensors: dict[str, np.ndarray]) -> None:
        """Strict load: the tensor map and model state must cover each other."""
        weights = {k: v for k, v in tensors.items() if not k.startswith(CONFIG_PREFIX)}
        state = self.state()
        missing = sorted(set(state) - set(weights))
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {', '.join(missing)}")
        self.load_state(weights)

    @classmethod
    def from_checkpoint(cls, path, seed: int = 0) -> "AHIQModel":
        tensors = ckpt_io.load_checkpoint(path)
        cfg = config_from_tensors(tensors)
        model = cls(cfg, seed=seed)
        model.load(tensors)
        return model


# ---------------------------------------------------------------------------
# config echo
# ---------------------------------------------------------------------------


def _encode(value) -> np.ndarray:
    if isinstance(value, str):
        return np.array([float(ord(ch)) for ch in value], dtype=np.float64)
    if isinstance(value, (tuple, list)):
        return np.array([float(v) for v in value], dtype=np.float64)
    if isinstance(value, bool):
        return np.array(float(value), dtype=np.float64)
    return np.array(float(value), dtype=np.float64)


def config_to_tensors(cfg: ModelConfig) -> dict[str, np.ndarray]:
    flat = {
        "vit.patch_size": cfg.vit.patch_size,
        "vit.depth": cfg.vit.depth,
        "vit.width": cfg.vit.width,
        "vit.heads": cfg.vit.heads,
        "vit.tapped_blocks": cfg.vit.tapped_blocks,
        "vit.ffn_ratio": cfg.vit.ffn_ratio,
        "vit.ln_eps": cfg.vit.ln_eps,
        "cnn.stem_channels": cfg.cnn.stem_channels,
        "cnn.mid_channels": cfg.cnn.mid_channels,
        "cnn.out_channels": cfg.cnn.out_channels,
        "cnn.blocks": cfg.cnn.blocks,
        "cnn.tapped_layers": cfg.cnn.tapped_layers,
        "cnn.bn_eps": cfg.cnn.bn_eps,
        "deform_kernel": cfg.deform_kernel,
        "mix_channels": cfg.mix_channels,
        "head_hidden": cfg.head_hidden,
        "strategy": cfg.strategy,
        "pooling": cfg.pooling,
        "per_image_offsets": cfg.per_image_offsets,
    }
    return {CONFIG_PREFIX + key: _encode(val) for key, val in flat.items()}


def config_from_tensors(tensors: dict[str, np.ndarray]) -> ModelConfig:
    def num(key, cast=int):
        arr = tensors.get(CONFIG_PREFIX + key)
        if arr is None:
            raise ValueError(f"checkpoint lacks config entry {key!r}")
        return cast(float(arr))

    def ints(key):
        return tuple(int(v) for v in tensors[CONFIG_PREFIX + key])

    def text(key):
        return "".join(chr(int(v)) for v in tensors[CONFIG_PREFIX + key])

    vit = ViTConfig(
        patch_size=num("vit.patch_size"),
        depth=num("vit.depth"),
        width=num("vit.width"),
        heads=num("vit.heads"),
        tapped_blocks=ints("vit.tapped_blocks"),
        ffn_ratio=num("vit.ffn_ratio"),
        ln_eps=num("vit.ln_eps", float),
    )
    cnn = CNNConfig(
        stem_channels=num("cnn.stem_channels"),
        mid_channels=num("cnn.mid_channels"),
        out_channels=num("cnn.out_channels"),
        blocks=num("cnn.blocks"),
        tapped_layers=ints("cnn.tapped_layers"),
        bn_eps=num("cnn.bn_eps", float),
    )
    return ModelConfig(
        vit=vit,
        cnn=cnn,
        deform_kernel=num("deform_kernel"),
        mix_channels=num("mix_channels"),
        head_hidden=num("head_hidden"),
        strategy=text("strategy"),
        pooling=text("pooling"),
        per_image_offsets=bool(num("per_image_offsets")),
    )


# ---------------------------------------------------------------------------
# full-size pretrained-backbone load list
# ---------------------------------------------------------------------------


def full_size_load_list(backbone: str) -> dict[str, tuple[int, ...]]:
    """Tensor names and shapes a full-size model loads for one backbone."""
    if backbone in ("vit-b-16", "vit-b-8"):
        ps = 16 if backbone == "vit-b-16" else 8
        c, ffn = 768, 3072
        seq = (224 // ps) ** 2 + 1
        out: dict[str, tuple[int, ...]] = {
            "vit.patch_proj.weight": (c, 3, ps, ps),
            "vit.patch_proj.bias": (c,),
            "vit.cls_token": (1, 1, c),
            "vit.pos_embed": (1, seq, c),
        }
        for i in range(5):  # extraction taps blocks 0..4
            pre = f"vit.blocks.{i}."
            out[pre + "ln1.weight"] = (c,)
            out[pre + "ln1.bias"] = (c,)
            out[pre + "qkv.weight"] = (3 * c, c)
            out[pre + "qkv.bias"] = (3 * c,)
            out[pre + "out.weight"] = (c, c)
            out[pre + "out.bias"] = (c,)
            out[pre + "ln2.weight"] = (c,)
            out[pre + "ln2.bias"] = (c,)
            out[pre + "fc1.weight"] = (ffn, c)
            out[pre + "fc1.bias"] = (ffn,)
            out[pre + "fc2.weight"] = (c, ffn)
            out[pre + "fc2.bias"] = (c,)
        return out
    if backbone == "resnet50":
        stem, mid, wide = 64, 64, 256

        def bn(prefix: str, ch: int) -> dict[str, tuple[int, ...]]:
            return {
                prefix + ".weight": (ch,),
                prefix + ".bias": (ch,),
                prefix + ".running_mean": (ch,),
                prefix + ".running_var": (ch,),
            }

        out = {"cnn.stem.conv.weight": (stem, 3, 7, 7)}
        out.update(bn("cnn.stem.bn", stem))
        in_ch = stem
        for i in range(3):
            pre = f"cnn.blocks.{i}."
            out[pre + "conv1.weight"] = (mid, in_ch, 1, 1)
            out.update(bn(pre + "bn1", mid))
            out[pre + "conv2.weight"] = (mid, mid, 3, 3)
            out.update(bn(pre + "bn2", mid))
            out[pre + "conv3.weight"] = (wide, mid, 1, 1)
            out.update(bn(pre + "bn3", wide))
            if i == 0:
                out[pre + "down.conv.weight"] = (wide, in_ch, 1, 1)
                out.update(bn(pre + "down.bn", wide))
            in_ch = wide
        return out
    raise ValueError(f"unknown backbone {backbone!r}")


def shipped_load_list() -> dict[str, dict[str, list[int]]]:
    """The manifest file bundled for external weight converters."""
    path = importlib_resources.files("ahiq").joinpath("resources/full_backbone_load_list.json")
    return json.loads(path.read_text(encoding="utf-8"))


def load_pretrained_backbones(model: AHIQModel, path) -> list[str]:
    """Load an externally converted backbone checkpoint into the model.

    The file must cover exactly one backbone's declared load list; returns
    the loaded tensor names.
    """
    tensors = ckpt_io.load_checkpoint(path)
    prefixes = {name.split(".", 1)[0] for name in tensors}
    if prefixes == {"vit"}:
        family = "vit-b-16" if model.cfg.vit.patch_size == 16 else "vit-b-8"
    elif prefixes == {"cnn"}:
        family = "resnet50"
    else:
        raise ValueError(f"checkpoint mixes prefixes {sorted(prefixes)}; expected one backbone")
    expected = full_size_load_list(family)
    missing = sorted(set(expected) - set(tensors))
    unexpected = sorted(set(tensors) - set(expected))
    if missing or unexpected:
        parts = []
        if missing:
            parts.append("missing: " + ", ".join(missing))
        if unexpected:
            parts.append("unexpected: " + ", ".join(unexpected))
        raise ValueError(f"backbone checkpoint does not match the {family} load list; " + "; ".join(parts))
    model.load_state(tensors)
    return sorted(tensors)
