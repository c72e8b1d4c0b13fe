#!/usr/bin/env python3
"""Generate backbone weight fixtures in the safetensors container with
torchvision's canonical parameter names and shapes.

The sandbox has no network access to the public model zoos, so fixtures are
randomly initialized torchvision architectures; naming, shapes, dtypes, and
file layout are identical to the published checkpoints, which is what the
exporter's name mapping and verification exercise.  Run against genuinely
downloaded state dicts, the same code paths apply unchanged.

Usage: python3 generate_fixtures.py <out_dir> [--seed N]
"""

import argparse
import json
import struct
import sys
from pathlib import Path

import torch
import torchvision


def save_safetensors(state_dict, path):
    header = {}
    chunks = []
    offset = 0
    dtype_names = {torch.float32: "F32", torch.int64: "I64"}
    for name, tensor in state_dict.items():
        t = tensor.contiguous()
        if t.dtype not in dtype_names:
            t = t.to(torch.float32)
        raw = t.numpy().tobytes()
        header[name] = {
            "dtype": dtype_names[t.dtype],
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        offset += len(raw)
        chunks.append(raw)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=20220405)
    args = parser.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(args.seed)
    models = {
        "resnet50": torchvision.models.resnet50(),
        "vit_b_16": torchvision.models.vit_b_16(),
        "vit_b_8": torchvision.models.vision_transformer.VisionTransformer(
            image_size=224, patch_size=8, num_layers=12, num_heads=12,
            hidden_dim=768, mlp_dim=3072,
        ),
    }
    for name, model in models.items():
        path = out / f"{name}.safetensors"
        save_safetensors(model.state_dict(), path)
        print(f"wrote {path} ({path.stat().st_size} bytes)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
