"""Correlation metrics for score evaluation: PLCC, SROCC, the challenge main
score (their sum), and a PSNR baseline.  All arithmetic is float64."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class DegenerateInputError(ValueError):
    """Inputs have no variance (or too few points) to correlate."""


def _as_series(x: Sequence[float], name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 2:
        raise DegenerateInputError(f"{name} needs at least 2 values, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def plcc(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson linear correlation coefficient."""
    xa, ya = _as_series(x, "x"), _as_series(y, "y")
    if xa.size != ya.size:
        raise ValueError(f"length mismatch: {xa.size} vs {ya.size}")
    xc = xa - xa.mean()
    yc = ya - ya.mean()
    denom = math.sqrt(float((xc * xc).sum()) * float((yc * yc).sum()))
    if denom == 0.0:
        raise DegenerateInputError("zero variance input to plcc")
    return float((xc * yc).sum()) / denom


def rank_average_ties(x: Sequence[float]) -> np.ndarray:
    """Fractional ranks (1-based); tied values share the mean of their range."""
    xa = np.asarray(x, dtype=np.float64)
    order = np.argsort(xa, kind="stable")
    ranks = np.empty(xa.size, dtype=np.float64)
    i = 0
    while i < xa.size:
        j = i
        while j + 1 < xa.size and xa[order[j + 1]] == xa[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def srocc(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank-order correlation: Pearson on average-tie ranks."""
    xa, ya = _as_series(x, "x"), _as_series(y, "y")
    if xa.size != ya.size:
        raise ValueError(f"length mismatch: {xa.size} vs {ya.size}")
    return plcc(rank_average_ties(xa), rank_average_ties(ya))


def main_score(plcc_value: float, srocc_value: float) -> float:
    """Challenge ranking metric: PLCC + SROCC."""
    return plcc_value + srocc_value


def psnr(ref: np.ndarray, dist: np.ndarray, max_value: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give +inf."""
    ra = np.asarray(ref, dtype=np.float64)
    da = np.asarray(dist, dtype=np.float64)
    if ra.shape != da.shape:
        raise ValueError(f"image shapes differ: {ra.shape} vs {da.shape}")
    mse = float(((ra - da) ** 2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


@dataclass
class EvalReport:
    """Per-sample predictions with correlation aggregates."""

    rows: list[tuple[str, float, float]]  # (sample_id, predicted, mos)
    plcc: float
    srocc: float
    main: float

    @classmethod
    def from_rows(cls, rows: Sequence[tuple[str, float, float]]) -> "EvalReport":
        rows = sorted(rows, key=lambda r: r[0])
        pred = [r[1] for r in rows]
        mos = [r[2] for r in rows]
        p = plcc(pred, mos)
        s = srocc(pred, mos)
        return cls(rows=list(rows), plcc=p, srocc=s, main=main_score(p, s))

    def to_csv(self) -> str:
        lines = ["sample_id,predicted,mos"]
        for sid, pred, mos in self.rows:
            lines.append(f"{sid},{pred:.6f},{mos:.6f}")
        lines.append(f"# plcc={self.plcc:.6f}")
        lines.append(f"# srocc={self.srocc:.6f}")
        lines.append(f"# main={self.main:.6f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
