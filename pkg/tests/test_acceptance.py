"""Acceptance suite: every release criterion at its stated tolerance, one
pass line printed per criterion.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import math
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from ahiq import tensor as T
from ahiq.backbones import CNNConfig, ViTConfig
from ahiq.checkpoint import (
    CheckpointFormatError,
    deserialize,
    load_checkpoint,
    save_checkpoint,
    serialize,
)
from ahiq.gradcheck import gradcheck
from ahiq.head import weighted_pool
from ahiq.metrics import main_score, plcc, srocc
from ahiq.model import (
    AHIQModel,
    ModelConfig,
    full_b16,
    full_size_load_list,
    load_pretrained_backbones,
    toy_b16,
    toy_b8,
)
from ahiq.tensor import Tensor, backward
from ahiq.train_eval import ArrayPairDataset, TrainConfig, train
from tests.gradcheck_cases import CASES
from tests.test_metrics import plcc_oracle, ranks_oracle

REPO_ROOT = Path(__file__).resolve().parent.parent


def announce(name: str, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"\nACCEPTANCE {name}: PASS{suffix}")


# ---------------------------------------------------------------------------
# autodiff: finite differences over every registered op
# ---------------------------------------------------------------------------


def test_autodiff_gradient_suite():
    missing = set(T.OP_REGISTRY) - set(CASES)
    assert not missing, f"registered ops without gradient-check cases: {missing}"
    rng = np.random.default_rng(0xD1FF)
    start = time.monotonic()
    for name in sorted(CASES):
        factory = CASES[name]
        for _ in range(20):
            fn, inputs = factory(rng)
            gradcheck(fn, inputs, rng, eps=1e-5, rtol=1e-4, atol=1e-6)
    elapsed = time.monotonic() - start
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f}s (budget 60s)"
    announce("autodiff-gradients", f"{len(CASES)} ops x 20 instances in {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# deformable convolution oracles
# ---------------------------------------------------------------------------


def test_deformable_conv_oracles():
    rng = np.random.default_rng(0xDEF0)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 6))
        o = int(rng.integers(1, 6))
        h = int(rng.integers(3, 13))
        w = int(rng.integers(3, 13))
        k = int(rng.choice([1, 3, 5]))
        if h < k or w < k:
            k = 1
        x = Tensor(rng.standard_normal((n, c, h, w)))
        wt = Tensor(rng.standard_normal((o, c, k, k)))
        b = Tensor(rng.standard_normal(o))
        zero_off = Tensor(np.zeros((n, 2 * k * k, h, w)))
        got = T.deform_conv2d(x, zero_off, wt, b)
        ref = T.conv2d(x, wt, b, stride=1, padding=(k - 1) // 2)
        worst = max(worst, float(np.abs(got.data - ref.data).max()))
    assert worst < 1e-6, f"zero-offset equivalence max diff {worst:.2e}"

    # integer offset: (dy, dx) = (0, 1) equals conv over the shifted canvas
    x = rng.standard_normal((1, 2, 9, 9))
    wt = rng.standard_normal((2, 2, 3, 3))
    off = np.zeros((1, 18, 9, 9))
    off[0, 1::2] = 1.0
    got = T.deform_conv2d(Tensor(x), Tensor(off), Tensor(wt))
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 2)))
    ref = T.conv2d(Tensor(padded), Tensor(wt), stride=1, padding=0)
    shift_diff = float(np.abs(got.data - ref.data).max())
    assert shift_diff < 1e-6

    # gradient w.r.t. the offsets themselves
    x = Tensor(rng.standard_normal((1, 2, 5, 5)))
    wt = Tensor(rng.standard_normal((2, 2, 3, 3)))
    off = Tensor(
        rng.integers(-1, 2, size=(1, 18, 5, 5)) + rng.uniform(0.2, 0.8, (1, 18, 5, 5)),
        requires_grad=True,
    )
    gradcheck(lambda o: T.deform_conv2d(x, o, wt), [off], rng)
    announce("deformable-conv-oracles", f"50 geometries, worst zero-offset diff {worst:.2e}")


# ---------------------------------------------------------------------------
# shape contract at both published geometries
# ---------------------------------------------------------------------------


def test_shape_contract_both_geometries():
    rng = np.random.default_rng(0x5AFE)
    ref = Tensor(rng.standard_normal((1, 3, 224, 224)).astype(np.float32))
    dist = Tensor(rng.standard_normal((1, 3, 224, 224)).astype(np.float32))

    model16 = AHIQModel(toy_b16(), seed=1).eval()
    out16 = model16.forward(ref, dist)
    assert out16.score.shape == (1,)
    assert out16.score_map.shape == (1, 1, 14, 14)
    assert out16.attn_map.shape == (1, 1, 14, 14)
    assert out16.offsets.shape == (1, 18, 56, 56)
    assert math.isfinite(out16.score.item())

    model8 = AHIQModel(toy_b8(), seed=1).eval()
    out8 = model8.forward(ref, dist)
    assert out8.score.shape == (1,)
    assert out8.score_map.shape == (1, 1, 28, 28)
    assert out8.attn_map.shape == (1, 1, 28, 28)
    assert math.isfinite(out8.score.item())
    announce("shape-contract", "B/16 -> 14x14 maps, B/8 -> 28x28 maps, scalar scores")


# ---------------------------------------------------------------------------
# weighted pooling identities
# ---------------------------------------------------------------------------


def test_pooling_identities():
    rng = np.random.default_rng(0x700C)
    for _ in range(25):
        s_arr = rng.standard_normal((1, 1, 6, 6))
        w_arr = np.abs(rng.standard_normal((1, 1, 6, 6))) + 0.05
        s, w = Tensor(s_arr), Tensor(w_arr)
        uniform = Tensor(np.full_like(w_arr, float(rng.uniform(0.1, 3.0))))
        assert abs(weighted_pool(s, uniform).data[0] - s_arr.mean()) < 1e-6
        base = weighted_pool(s, w).data[0]
        lam = float(rng.uniform(0.01, 100))
        assert abs(weighted_pool(s, Tensor(lam * w_arr)).data[0] - base) < 1e-6
        assert s_arr.min() - 1e-9 <= base <= s_arr.max() + 1e-9

    s = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    w_arr = np.abs(rng.standard_normal((1, 1, 4, 4))) + 0.1
    backward(weighted_pool(s, Tensor(w_arr)).sum())
    analytic = w_arr / w_arr.sum()
    assert np.abs(s.grad - analytic).max() < 1e-6
    gradcheck(
        lambda a: weighted_pool(a, Tensor(w_arr)),
        [Tensor(s.data.copy(), requires_grad=True)],
        rng,
    )
    announce("pooling-identities", "mean, scale invariance, bounds, w/sum(w) gradient")


# ---------------------------------------------------------------------------
# correlation metrics against brute-force definitions
# ---------------------------------------------------------------------------


def test_correlation_oracles():
    rng = np.random.default_rng(0xC0CC)
    for _ in range(100):
        n = int(rng.integers(3, 101))
        if rng.random() < 0.5:
            x = rng.integers(0, 12, size=n).astype(float)  # tie-rich
            y = rng.integers(0, 12, size=n).astype(float)
        else:
            x = rng.standard_normal(n)
            y = rng.standard_normal(n)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        assert abs(plcc(x, y) - plcc_oracle(x, y)) < 1e-10
        rx, ry = ranks_oracle(x), ranks_oracle(y)
        if np.ptp(rx) > 0 and np.ptp(ry) > 0:
            assert abs(srocc(x, y) - plcc_oracle(rx, ry)) < 1e-10

    x = rng.standard_normal(64)
    y = rng.standard_normal(64)
    assert abs(plcc(3.7 * x + 11, y) - plcc(x, y)) < 1e-12
    assert abs(srocc(np.exp(x), y) - srocc(x, y)) < 1e-12

    # published main-score rows: 0.823 + 0.813 = 1.636 reproduces exactly;
    # the challenge row prints 1.651 because the table summed unrounded
    # values, while the rounded addends give 1.650
    assert main_score(0.823, 0.813) == 1.636
    assert main_score(0.828, 0.822) == pytest.approx(1.650, abs=1e-12)
    assert abs(main_score(0.828, 0.822) - 1.651) <= 1e-3 + 1e-12
    announce("correlation-oracles", "100 vectors to 1e-10; table rows 1.636 exact, 1.650/1.651 within print rounding")


# ---------------------------------------------------------------------------
# overfit smoke test
# ---------------------------------------------------------------------------

SMOKE_EPOCHS = 80  # pinned: first-below-1% measured at epoch 37, x2 margin
SMOKE_LR = 2e-3


def smoke_model_config() -> ModelConfig:
    return ModelConfig(
        vit=ViTConfig(patch_size=16, depth=2, width=32, heads=4, tapped_blocks=(0, 1)),
        cnn=CNNConfig(stem_channels=8, mid_channels=8, out_channels=16),
        mix_channels=32,
        head_hidden=32,
    )


def smoke_pairs(seed: int = 11) -> ArrayPairDataset:
    """Eight pairs whose MOS is a fixed affine map of mean |pixel diff|."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(8):
        ref = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
        amp = 6 * (i + 1)
        noise = rng.integers(-amp, amp + 1, size=ref.shape, dtype=np.int16)
        dist = np.clip(ref.astype(np.int16) + noise, 0, 255).astype(np.uint8)
        mos = 0.05 * float(np.abs(ref.astype(np.float32) - dist.astype(np.float32)).mean()) + 1.0
        items.append((ref, dist, mos, f"pair{i:02d}"))
    return ArrayPairDataset(items)


def test_overfit_smoke():
    start = time.monotonic()
    ds = smoke_pairs()
    model = AHIQModel(smoke_model_config(), seed=5)
    cfg = TrainConfig(
        epochs=SMOKE_EPOCHS, batch_size=8, lr=SMOKE_LR, t_max=SMOKE_EPOCHS,
        seed=3, val_every=10**9, eval_crops=1,
    )
    result = train(model, ds, ds, cfg)
    elapsed = time.monotonic() - start
    ratio = result.train_losses[-1] / result.train_losses[0]
    assert ratio < 0.01, f"final/initial loss ratio {ratio:.4f} (need < 0.01)"
    assert elapsed < 600.0, f"smoke training took {elapsed:.0f}s (budget 600s)"
    announce("overfit-smoke", f"loss ratio {ratio:.5f} after {SMOKE_EPOCHS} epochs in {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# protocol reproducibility through the CLI
# ---------------------------------------------------------------------------


def _write_cli_dataset(root: Path, rng) -> list[str]:
    from PIL import Image

    ref_dir = root / "ref"
    dist_dir = root / "dist"
    ref_dir.mkdir(parents=True)
    dist_dir.mkdir(parents=True)
    lines = []
    for r in range(6):
        rid = f"A{r:04d}"
        ref = rng.integers(0, 256, size=(232, 232, 3), dtype=np.uint8)
        Image.fromarray(ref, "RGB").save(ref_dir / f"{rid}.bmp")
        for d in range(2):
            name = f"{rid}_{d:02d}_00.png"
            noise = rng.integers(0, 25 * (d + 1), size=ref.shape, dtype=np.int16)
            dist = np.clip(ref.astype(np.int16) + noise, 0, 255).astype(np.uint8)
            Image.fromarray(dist, "RGB").save(dist_dir / name)
            mos = float(np.abs(ref.astype(np.float32) - dist).mean() + 0.01 * r)
            lines.append(f"{name},{mos}")
    labels = root / "labels.txt"
    labels.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [
        f"data.labels={labels}",
        f"data.ref_dir={ref_dir}",
        f"data.dist_dir={dist_dir}",
    ]


def test_protocol_reproducibility(tmp_path):
    from ahiq.cli import main as cli_main

    rng = np.random.default_rng(0x5EED)
    data_args = _write_cli_dataset(tmp_path / "data", rng)
    tiny = [
        "model.vit_depth=1", "model.vit_width=8", "model.vit_heads=2",
        "model.vit_tapped=0", "model.cnn_stem=4", "model.cnn_mid=4",
        "model.cnn_out=8", "model.mix_channels=8", "model.head_hidden=8",
        "train.epochs=2", "train.batch_size=6", "train.eval_crops=2",
    ]

    def run(out_name: str) -> dict[str, bytes]:
        out = tmp_path / out_name
        code = cli_main(["train", "--out", str(out), "--seed", "17"] + tiny + data_args)
        assert code == 0
        return {
            name: (out / name).read_bytes()
            for name in ("best.ahiqw1", "train.log", "report.csv")
        }

    first = run("run_a")
    second = run("run_b")
    for name in first:
        assert first[name] == second[name], f"{name} differs between identical runs"
    announce("protocol-reproducibility", "checkpoint, log, and report byte-identical")


# ---------------------------------------------------------------------------
# checkpoint format guarantees
# ---------------------------------------------------------------------------


def test_checkpoint_format(tmp_path):
    rng = np.random.default_rng(0xC4C4)
    tensors = {
        "a.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "b.bias": rng.standard_normal(7),
        "c.scalar": np.float64(2.5).reshape(()),
        "d.empty": np.zeros((0, 2), dtype=np.float32),
    }
    path = tmp_path / "t.ahiqw1"
    save_checkpoint(tensors, path)
    back = load_checkpoint(path)
    for name, arr in tensors.items():
        assert back[name].tobytes() == np.asarray(arr).tobytes()
        assert back[name].dtype == np.asarray(arr).dtype

    blob = bytearray(serialize(tensors))
    blob[len(blob) // 2] ^= 0x40
    with pytest.raises(CheckpointFormatError):
        deserialize(bytes(blob))

    narrow = AHIQModel(
        ModelConfig(
            vit=ViTConfig(patch_size=16, depth=1, width=8, heads=2, tapped_blocks=(0,)),
            cnn=CNNConfig(stem_channels=4, mid_channels=4, out_channels=8),
            mix_channels=8, head_hidden=8,
        ),
        seed=0,
    )
    wide = AHIQModel(
        ModelConfig(
            vit=ViTConfig(patch_size=16, depth=1, width=16, heads=2, tapped_blocks=(0,)),
            cnn=CNNConfig(stem_channels=4, mid_channels=4, out_channels=8),
            mix_channels=8, head_hidden=8,
        ),
        seed=0,
    )
    narrow.save(tmp_path / "narrow.ahiqw1")
    with pytest.raises(ValueError, match=r"vit\."):
        wide.load(load_checkpoint(tmp_path / "narrow.ahiqw1"))
    announce("checkpoint-format", "round trip, CRC detection, named geometry rejection")


# ---------------------------------------------------------------------------
# ablation switches
# ---------------------------------------------------------------------------


def test_ablation_switches():
    from ahiq.fusion import FusionConfig, FusionModule

    def tiny(strategy):
        return ModelConfig(
            vit=ViTConfig(patch_size=16, depth=1, width=8, heads=2, tapped_blocks=(0,)),
            cnn=CNNConfig(stem_channels=4, mid_channels=4, out_channels=8),
            mix_channels=8, head_hidden=8, strategy=strategy,
        )

    rng = np.random.default_rng(0xAB1A)
    ref = rng.standard_normal((1, 3, 224, 224)).astype(np.float32)
    dist = rng.standard_normal((1, 3, 224, 224)).astype(np.float32)

    concat_model = AHIQModel(tiny("concat-only"), seed=2)
    names = set(concat_model.state())
    assert not any("offset" in n or "deform" in n for n in names)
    baseline = concat_model.score_pairs(ref, dist)
    assert baseline.tobytes() == concat_model.score_pairs(ref, dist).tobytes()

    vit_model = AHIQModel(tiny("vit-only"), seed=2)
    assert not any(n.startswith("cnn.") for n in vit_model.state())
    cnn_model = AHIQModel(tiny("cnn-only"), seed=2)
    assert not any(n.startswith("vit.") for n in cnn_model.state())

    # at the fusion boundary, each single-branch path is bitwise insensitive
    # to the other branch's features
    fcfg = FusionConfig(vit_channels=8, cnn_channels=24, grid=14, cnn_extent=56,
                        mix_channels=8, strategy="vit-only")
    fusion = FusionModule(fcfg, np.random.default_rng(0))
    vit_feats = Tensor(rng.standard_normal((1, 8, 14, 14)).astype(np.float32))
    outs = []
    for _ in range(2):
        cnn_feats = Tensor(rng.standard_normal((1, 24, 14, 14)).astype(np.float32))
        pair = fusion.pair_features(vit_feats, cnn_feats)
        outs.append(fusion.fuse_pair(pair, pair).data.tobytes())
    assert outs[0] == outs[1]

    fcfg = FusionConfig(vit_channels=8, cnn_channels=24, grid=14, cnn_extent=56,
                        mix_channels=8, strategy="cnn-only")
    fusion = FusionModule(fcfg, np.random.default_rng(0))
    cnn_feats = Tensor(rng.standard_normal((1, 24, 14, 14)).astype(np.float32))
    outs = []
    for _ in range(2):
        vit_feats = Tensor(rng.standard_normal((1, 8, 14, 14)).astype(np.float32))
        pair = fusion.pair_features(vit_feats, cnn_feats)
        outs.append(fusion.fuse_pair(pair, pair).data.tobytes())
    assert outs[0] == outs[1]

    for model in (vit_model, cnn_model):
        score = model.score_pairs(ref, dist)
        assert score.shape == (1,) and np.isfinite(score).all()
    announce("ablation-switches", "concat-only / vit-only / cnn-only structurally isolated")


# ---------------------------------------------------------------------------
# [SECONDARY] exporter: real-format pretrained files -> AHIQW1 -> full-size load
# ---------------------------------------------------------------------------


EXPORTER = REPO_ROOT / "exporter"


def _node_available() -> bool:
    return shutil.which("node") is not None


@pytest.mark.secondary
def test_secondary_exporter_roundtrip(tmp_path):
    if not _node_available():
        pytest.fail("node runtime unavailable; the exporter criterion cannot run")
    cli = EXPORTER / "dist" / "src" / "cli.js"
    if not cli.exists():
        build = subprocess.run(
            ["npx", "tsc"], cwd=EXPORTER, capture_output=True, text=True
        )
        assert build.returncode == 0, f"exporter build failed: {build.stderr}"

    fixtures = tmp_path / "fixtures"
    gen = subprocess.run(
        [sys.executable, str(EXPORTER / "fixtures" / "generate_fixtures.py"), str(fixtures)],
        capture_output=True, text=True,
    )
    assert gen.returncode == 0, f"fixture generation failed: {gen.stderr}"

    outputs = {}
    for backbone, fixture in (("resnet50", "resnet50.safetensors"),
                              ("vit-b-16", "vit_b_16.safetensors")):
        out_path = tmp_path / f"{backbone}.ahiqw1"
        export = subprocess.run(
            ["node", str(cli), "export", "--src", str(fixtures / fixture),
             "--backbone", backbone, "--out", str(out_path)],
            capture_output=True, text=True,
        )
        assert export.returncode == 0, f"export failed: {export.stderr}"
        verify = subprocess.run(
            ["node", str(cli), "verify", "--out", str(out_path),
             "--src", str(fixtures / fixture)],
            capture_output=True, text=True,
        )
        assert verify.returncode == 0, f"verify failed: {verify.stdout}{verify.stderr}"
        assert "verification OK" in verify.stdout
        assert all(
            line.endswith("max_abs_diff=0")
            for line in verify.stdout.strip().split("\n")
            if "max_abs_diff" in line
        )
        outputs[backbone] = out_path

    # the exported name set equals the declared load list exactly
    for backbone, out_path in outputs.items():
        tensors = load_checkpoint(out_path)
        assert set(tensors) == set(full_size_load_list(backbone))

    # and the files load into the primary at full-size geometry
    model = AHIQModel(full_b16(), seed=0)
    loaded_cnn = load_pretrained_backbones(model, outputs["resnet50"])
    loaded_vit = load_pretrained_backbones(model, outputs["vit-b-16"])
    assert len(loaded_cnn) == 55
    assert len(loaded_vit) == 64
    src = load_checkpoint(outputs["vit-b-16"])
    got = model.state()["vit.blocks.3.qkv.weight"].data
    assert got.tobytes() == src["vit.blocks.3.qkv.weight"].tobytes()
    announce("secondary-exporter", "export+verify zero-diff; full-size load clean")
