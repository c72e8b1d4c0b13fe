"""Training loop and evaluation harness: MSE objective, AdamW with decoupled
weight decay, cosine-annealed learning rate, per-epoch validation with
20-crop scoring, and best-checkpoint selection by validation main score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import tensor as T
from .data import paired_hflip, paired_random_crop, normalize, twenty_crop_score
from .metrics import EvalReport
from .tensor import GradTape, Tensor


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss or gradient)."""


class PairDataset(Protocol):
    """Minimal dataset contract: decoded uint8 pairs with labels."""

    def __len__(self) -> int: ...

    def load(self, index: int) -> tuple[np.ndarray, np.ndarray, float, str]:
        """Returns (ref u8 HWC, dist u8 HWC, mos, sample_id)."""
        ...


class ArrayPairDataset:
    """In-memory dataset of (ref, dist, mos, sample_id) tuples."""

    def __init__(self, items: Sequence[tuple[np.ndarray, np.ndarray, float, str]]):
        self.items = list(items)

    def __len__(self):
        return len(self.items)

    def load(self, index):
        return self.items[index]


class ManifestPairDataset:
    """Decodes manifest samples from disk on access."""

    def __init__(self, samples):
        from .data import decode_image

        self.samples = list(samples)
        self._decode = decode_image

    def __len__(self):
        return len(self.samples)

    def load(self, index):
        s = self.samples[index]
        return self._decode(s.ref_path), self._decode(s.dist_path), s.mos, s.sample_id


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target vector."""
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred - Tensor(target)
    return (diff * diff).mean()


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t_max: int = 50
    eta_min: float = 0.0
    seed: int = 0
    val_every: int = 1  # epochs between validation passes
    eval_crops: int = 20


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    """eta_min + (eta_max - eta_min) * (1 + cos(pi * epoch / T_max)) / 2,
    clamped at T_max."""
    frac = min(epoch, cfg.t_max) / cfg.t_max
    return cfg.eta_min + 0.5 * (cfg.lr - cfg.eta_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Bias-corrected Adam with decay decoupled from the gradient update."""

    def __init__(self, named_params: Sequence[tuple[str, Tensor]], cfg: TrainConfig):
        self.named_params = list(named_params)
        self.cfg = cfg
        self.step_count = 0
        self.m = [np.zeros(p.shape, dtype=np.float32) for _, p in self.named_params]
        self.v = [np.zeros(p.shape, dtype=np.float32) for _, p in self.named_params]

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1**t
        bc2 = 1.0 - cfg.beta2**t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            if p.grad is None:
                g = np.zeros(p.shape, dtype=np.float32)
            else:
                g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient in parameter {name!r}")
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
            # decoupled decay: applied to the pre-update parameter value
            p.data = p.data - lr * update.astype(p.dtype) - (lr * cfg.weight_decay) * p.data

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    best_epoch: int
    best_main: float
    log_lines: list[str]
    train_losses: list[float]


def _augment_batch(dataset, indices, rng):
    refs, dists, moses, ids = [], [], [], []
    for i in indices:
        ref, dist, mos, sid = dataset.load(int(i))
        ref, dist = paired_random_crop(ref, dist, rng)
        ref, dist = paired_hflip(ref, dist, rng)
        refs.append(normalize(ref))
        dists.append(normalize(dist))
        moses.append(mos)
        ids.append(sid)
    return np.stack(refs), np.stack(dists), np.array(moses, dtype=np.float32), ids


def _snapshot(model) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.state().items()}


def train(
    model,
    train_set: PairDataset,
    val_set: PairDataset,
    cfg: TrainConfig,
    log_fn: Optional[Callable[[str], None]] = None,
) -> TrainResult:
    """Optimize the model on train_set; select by validation main score.

    One log line per epoch: ``epoch=<n> lr=<v> loss=<v> val_plcc=<v>
    val_srocc=<v>`` (six decimals; validation fields are ``nan`` on epochs
    where validation is skipped).
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(list(model.named_parameters()), cfg)
    best_state = _snapshot(model)
    best_main = -math.inf
    best_epoch = -1
    log_lines: list[str] = []
    train_losses: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(len(train_set))
        model.train()
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            refs, dists, moses, ids = _augment_batch(train_set, batch, rng)
            with GradTape() as tape:
                out = model.forward(Tensor(refs), Tensor(dists))
                loss = mse_loss(out.score, moses)
                loss_val = loss.item()
                if not math.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch} on samples {ids}"
                    )
                tape.backward(loss)
            opt.step(lr)
            opt.zero_grad()
            epoch_losses.append(loss_val)
        mean_loss = float(np.mean(epoch_losses))
        train_losses.append(mean_loss)
        val_plcc = val_srocc = float("nan")
        if (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1:
            report = evaluate(model, val_set, np.random.default_rng(cfg.seed + 1 + epoch),
                              crops=cfg.eval_crops)
            val_plcc, val_srocc = report.plcc, report.srocc
            if report.main > best_main:
                best_main = report.main
                best_epoch = epoch
                best_state = _snapshot(model)
        line = (
            f"epoch={epoch} lr={lr:.6f} loss={mean_loss:.6f} "
            f"val_plcc={val_plcc:.6f} val_srocc={val_srocc:.6f}"
        )
        log_lines.append(line)
        if log_fn is not None:
            log_fn(line)
    return TrainResult(
        best_state=best_state,
        best_epoch=best_epoch,
        best_main=best_main,
        log_lines=log_lines,
        train_losses=train_losses,
    )


def evaluate(model, dataset: PairDataset, rng: np.random.Generator, crops: int = 20) -> EvalReport:
    """Score every sample with the 20-crop protocol and correlate with MOS."""
    if len(dataset) == 0:
        raise ValueError("evaluation set must be non-empty")
    rows = []
    for i in range(len(dataset)):
        ref, dist, mos, sid = dataset.load(i)
        pred = twenty_crop_score(model, ref, dist, rng, crops=crops)
        rows.append((sid, pred, mos))
    return EvalReport.from_rows(rows)
