"""Dataset ingestion, reference-wise splits, paired augmentation, input
normalization, and the 20-crop evaluation protocol.

Label files are UTF-8 ``dist_filename,mos`` lines (``#`` comments allowed);
the reference id is the distorted filename's stem up to the first underscore,
which also names the reference image file.  Decoding is restricted to 8-bit
RGB PNG and BMP so the ingestion surface stays small.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CROP_SIZE = 224
# ImageNet statistics, matching the pretrained backbones the network builds on
CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

_ALLOWED_FORMATS = {"PNG", "BMP"}
_REF_EXTENSIONS = (".bmp", ".png", ".BMP", ".PNG")


class ManifestError(ValueError):
    """Label file or dataset layout is malformed."""


class ImageFormatError(ValueError):
    """Image is not an 8-bit RGB PNG/BMP."""


@dataclass(frozen=True)
class ImagePairSample:
    ref_path: str
    dist_path: str
    mos: float
    ref_id: str

    @property
    def sample_id(self) -> str:
        return os.path.basename(self.dist_path)


@dataclass
class DatasetManifest:
    ref_dir: str
    dist_dir: str
    label_file: str
    samples: list[ImagePairSample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    def ref_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.ref_id, None)
        return list(seen)


def reference_id(dist_filename: str) -> str:
    """PIPAL-style convention: the stem before the first underscore."""
    stem = Path(dist_filename).stem
    return stem.split("_", 1)[0]


def _locate_reference(ref_dir: str, ref_id: str, line_no: int) -> str:
    for ext in _REF_EXTENSIONS:
        cand = os.path.join(ref_dir, ref_id + ext)
        if os.path.isfile(cand):
            return cand
    raise ManifestError(
        f"line {line_no}: reference image for id {ref_id!r} not found under {ref_dir}"
    )


def load_manifest(label_file, ref_dir, dist_dir) -> DatasetManifest:
    label_file, ref_dir, dist_dir = str(label_file), str(ref_dir), str(dist_dir)
    if not os.path.isfile(label_file):
        raise ManifestError(f"label file not found: {label_file}")
    manifest = DatasetManifest(ref_dir=ref_dir, dist_dir=dist_dir, label_file=label_file)
    seen_pairs: set[tuple[str, str]] = set()
    with open(label_file, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) != 2:
                raise ManifestError(
                    f"line {line_no}: expected 'dist_filename,mos', got {line!r}"
                )
            dist_name, mos_text = fields[0].strip(), fields[1].strip()
            try:
                mos = float(mos_text)
            except ValueError:
                raise ManifestError(f"line {line_no}: unparsable MOS {mos_text!r}") from None
            if not math.isfinite(mos):
                raise ManifestError(f"line {line_no}: non-finite MOS {mos_text!r}")
            dist_path = os.path.join(dist_dir, dist_name)
            if not os.path.isfile(dist_path):
                raise ManifestError(f"line {line_no}: distorted image not found: {dist_path}")
            ref_id = reference_id(dist_name)
            ref_path = _locate_reference(ref_dir, ref_id, line_no)
            key = (ref_path, dist_path)
            if key in seen_pairs:
                raise ManifestError(f"line {line_no}: duplicate pair {dist_name!r}")
            seen_pairs.add(key)
            manifest.samples.append(
                ImagePairSample(ref_path=ref_path, dist_path=dist_path, mos=mos, ref_id=ref_id)
            )
    if not manifest.samples:
        logger.warning("label file %s produced an empty manifest", label_file)
    return manifest


def split_by_reference(
    manifest: DatasetManifest, seed: int
) -> tuple[list[ImagePairSample], list[ImagePairSample], list[ImagePairSample]]:
    """Shuffle reference ids and partition 60/20/20 by count (train takes the
    remainder); every sample of a reference lands in exactly one split."""
    ids = manifest.ref_ids()
    if len(ids) < 5:
        raise ManifestError(f"need at least 5 distinct reference ids, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(order)
    n_val = n // 5
    n_test = n // 5
    n_train = n - n_val - n_test
    train_ids = set(order[:n_train])
    val_ids = set(order[n_train : n_train + n_val])
    test_ids = set(order[n_train + n_val :])

    def pick(id_set):
        return [s for s in manifest.samples if s.ref_id in id_set]

    return pick(train_ids), pick(val_ids), pick(test_ids)


def decode_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG/BMP into an (H, W, 3) uint8 array."""
    with Image.open(path) as img:
        if img.format not in _ALLOWED_FORMATS:
            raise ImageFormatError(f"{path}: format {img.format!r} not supported (PNG/BMP only)")
        if img.mode != "RGB":
            raise ImageFormatError(f"{path}: mode {img.mode!r} is not 8-bit RGB")
        return np.asarray(img, dtype=np.uint8)


def normalize(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W), ImageNet-standardized."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ImageFormatError(f"normalize expects uint8 (H, W, 3), got {arr.dtype} {arr.shape}")
    scaled = arr.astype(np.float32) / 255.0
    out = (scaled - CHANNEL_MEAN) / CHANNEL_STD
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def denormalize(tensor: np.ndarray) -> np.ndarray:
    """Inverse of :func:`normalize`, returning float (H, W, 3) on 0..255."""
    hwc = np.asarray(tensor).transpose(1, 2, 0)
    return (hwc * CHANNEL_STD + CHANNEL_MEAN) * 255.0


def paired_random_crop(
    ref: np.ndarray, dist: np.ndarray, rng: np.random.Generator, size: int = CROP_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """One crop window applied to both images, preserving pair alignment."""
    if ref.shape != dist.shape:
        raise ValueError(f"pair shapes differ: {ref.shape} vs {dist.shape}")
    h, w = ref.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    window = (slice(top, top + size), slice(left, left + size))
    return ref[window], dist[window]


def paired_hflip(
    ref: np.ndarray, dist: np.ndarray, rng: np.random.Generator, p: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """Flip both images horizontally together with probability ``p``."""
    if rng.random() < p:
        return ref[:, ::-1].copy(), dist[:, ::-1].copy()
    return ref, dist


def twenty_crop_score(
    model, ref: np.ndarray, dist: np.ndarray, rng: np.random.Generator, crops: int = 20
) -> float:
    """Average prediction over ``crops`` seeded paired random crops."""
    refs = []
    dists = []
    for _ in range(crops):
        rc, dc = paired_random_crop(ref, dist, rng)
        refs.append(normalize(rc))
        dists.append(normalize(dc))
    scores = model.score_pairs(np.stack(refs), np.stack(dists))
    return float(np.mean(scores))
