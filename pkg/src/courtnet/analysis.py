"""Attention dumps over probe frames and the periodicity spectrum of fine-attention features.

The coarse summary of a P x P attention map is its column mass: how much
attention every patch receives, summed over query rows and averaged over
heads, folded row-major onto the p x p patch grid.  Each row of a
row-stochastic map contributes exactly 1, so the grid always sums to P.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import gamma as gamma_dist

from . import tensor as T
from .data import Sample, write_pgm
from .models import CourtNet

NONE_ALPHA = 0.01


@dataclass
class AttentionDump:
    """All attention maps of one prosecution forward pass on one image.

    Attributes:
        coarse: per block, an array [heads, P, P].
        fine: per block, an array [groups, D, D].
        grid: patches per side, so P = grid * grid.
    """

    coarse: list[np.ndarray]
    fine: list[np.ndarray]
    grid: int

    def summary(self, block: int = -1) -> np.ndarray:
        """Column mass of ``block``'s coarse map, head-averaged, as a grid x grid array."""
        return coarse_summary(self.coarse[block], self.grid)


def coarse_summary(maps: np.ndarray, grid: int) -> np.ndarray:
    """Fold the head-mean column mass of [heads, P, P] maps onto the patch grid."""
    maps = np.asarray(maps)
    mass = maps.mean(axis=0).sum(axis=0)
    return mass.reshape(grid, grid)


def _prosecution_trace(net: CourtNet, images: np.ndarray) -> list[dict]:
    trace: list[dict] = []
    with T.no_grad():
        net.prosecute(images, trace)
    return trace


def dump_attention(net: CourtNet, sample: Sample | np.ndarray) -> AttentionDump:
    """Capture every coarse and fine map of the prosecution network for one image."""
    image = sample.image if isinstance(sample, Sample) else np.asarray(sample)
    trace = _prosecution_trace(net, image[None, None].astype(np.float64))
    return AttentionDump(
        coarse=[rec["coarse"][0].copy() for rec in trace],
        fine=[rec["fine"][0].copy() for rec in trace],
        grid=net.config.embed.grid,
    )


@dataclass
class FeatureSeries:
    """Fine-attention input features at the target patch, one row per probe frame."""

    values: np.ndarray
    frames: list[int] = field(default_factory=list)
    patch_index: list[int] = field(default_factory=list)
    slot: list[int] = field(default_factory=list)
    block: int = -1

    def __len__(self) -> int:
        return self.values.shape[0]

    def write_csv(self, path: str | Path) -> None:
        dims = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "patch_index", "slot"] + [f"f{j}" for j in range(dims)])
            for i, row in enumerate(self.values):
                w.writerow([self.frames[i], self.patch_index[i], self.slot[i]] + [repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path: str | Path) -> "FeatureSeries":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:3] != ["frame", "patch_index", "slot"]:
            raise ValueError(f"{path}: not a feature series file")
        body = rows[1:]
        values = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64)
        if not body:
            values = values.reshape(0, len(rows[0]) - 3)
        return cls(
            values=values,
            frames=[int(r[0]) for r in body],
            patch_index=[int(r[1]) for r in body],
            slot=[int(r[2]) for r in body],
        )


def collect_feature_series(
    net: CourtNet,
    probe_set: Sequence[Sample],
    block: int = -1,
    batch_size: int = 36,
) -> FeatureSeries:
    """Record the fine-attention input at each frame's target patch, in frame order.

    Every patch is a single token, so the patch's token average is that token's
    feature vector (width = growth, 32 by default).
    """
    rows, frames, patches, slots = [], [], [], []
    for start in range(0, len(probe_set), batch_size):
        chunk = probe_set[start:start + batch_size]
        images = np.stack([s.image for s in chunk])[:, None].astype(np.float64)
        feat = _prosecution_trace(net, images)[block]["fine_input"]
        for b, s in enumerate(chunk):
            idx = int(s.metadata["patch_index"])
            rows.append(feat[b, idx])
            frames.append(int(s.metadata.get("frame", start + b)))
            patches.append(idx)
            slots.append(int(s.metadata.get("slot", 0)))
    width = net.config.prosecution.growth
    values = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return FeatureSeries(values, frames, patches, slots, block)


@dataclass
class Spectrum:
    """Per-dimension power over frequency bins k = 0..N-1 plus the dominant period.

    Attributes:
        power: array [N, dims], squared DFT magnitude of each mean-removed dimension.
        dominant_k: bin in 1..N//2 with the largest power summed over dimensions.
        dominant_period: N / dominant_k, or None when no bin stands out from noise.
        peak_ratio: summed power at dominant_k over the mean summed power in 1..N//2.
        false_alarm: probability that white noise gives a peak at least this strong.
    """

    power: np.ndarray
    dominant_k: int
    dominant_period: float | None
    peak_ratio: float
    false_alarm: float

    @property
    def n(self) -> int:
        return self.power.shape[0]

    def periods(self) -> np.ndarray:
        k = np.arange(1, self.n // 2 + 1)
        return self.n / k

    def write_csv(self, path: str | Path) -> None:
        half = self.n // 2
        summed = self.power.sum(axis=1)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "period", "power_sum"] + [f"p{j}" for j in range(self.power.shape[1])])
            for k in range(1, half + 1):
                w.writerow([k, repr(self.n / k), repr(float(summed[k]))] + [repr(float(v)) for v in self.power[k]])


def dft_matrix(n: int) -> np.ndarray:
    """The n x n matrix exp(-2 pi i k t / n), built with exact integer reduction of k*t."""
    kt = np.outer(np.arange(n), np.arange(n)) % n
    return np.exp(-2j * np.pi * kt / n)


def format_period(period: float | None) -> str:
    if period is None:
        return "none"
    return str(int(round(period))) if abs(period - round(period)) < 1e-9 else f"{period:.4f}"


def dft_power(series: FeatureSeries | np.ndarray, alpha: float = NONE_ALPHA) -> Spectrum:
    """Direct DFT power spectrum of every mean-removed dimension and the dominant period.

    The dominant bin k* maximizes the dimension-summed power over 1..N//2.  To
    decide whether it is a real periodicity, every dimension is first scaled to
    unit total power; under white noise each scaled bin then follows a Gamma law
    with shape = number of active dimensions, and the peak is reported only if
    the chance of any of the N//2 bins reaching it is below ``alpha``.

    Raises:
        ValueError: if the series has fewer than two frames.
    """
    values = series.values if isinstance(series, FeatureSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    if n < 2:
        raise ValueError("series needs at least two frames")
    centered = values - values.mean(axis=0)
    coeffs = dft_matrix(n) @ centered
    power = coeffs.real**2 + coeffs.imag**2
    half = n // 2
    band = power[1:half + 1]
    summed = band.sum(axis=1)
    k_star = int(np.argmax(summed)) + 1
    mean_sum = float(summed.mean())
    ratio = float(summed[k_star - 1] / mean_sum) if mean_sum > 0 else 0.0

    col_total = band.sum(axis=0)
    active = col_total > 1e-12 * max(float(col_total.max()), 1e-300)
    dims = int(active.sum())
    if dims == 0:
        return Spectrum(power, k_star, None, ratio, 1.0)
    # each active dimension scaled to mean bin power 1, then averaged over dims
    scaled = (band[:, active] / (col_total[active] / half)).mean(axis=1)
    peak = float(scaled[k_star - 1])
    per_bin = float(gamma_dist.sf(peak, a=dims, scale=1.0 / dims))
    false_alarm = float(-math.expm1(half * math.log1p(-min(per_bin, 1.0 - 1e-16))))
    period = n / k_star if false_alarm < alpha else None
    return Spectrum(power, k_star, period, ratio, false_alarm)


def parseval_gap(series: FeatureSeries | np.ndarray) -> float:
    """Relative gap between total DFT power and N times the mean-removed energy."""
    values = series.values if isinstance(series, FeatureSeries) else np.asarray(series, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    n = values.shape[0]
    centered = values - values.mean(axis=0)
    total = dft_power(values).power.sum()
    energy = n * float((centered**2).sum())
    return abs(total - energy) / max(energy, 1e-300)


def write_heatmap(path: str | Path, grid: np.ndarray) -> None:
    """Min-max normalize ``grid`` to [0, 1] and write it as an 8-bit PGM."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    scaled = (grid - lo) / (hi - lo) if hi > lo else np.zeros_like(grid)
    write_pgm(path, scaled)


def probe_attention_report(
    net: CourtNet,
    probe_set: Sequence[Sample],
    out_dir: str | Path,
    block: int = -1,
    heatmaps: bool = True,
) -> dict:
    """Dump coarse summaries and the feature series for every probe frame.

    Writes ``summaries.csv`` (one row per frame: frame, target patch, argmax
    patch, then the P column masses), ``series.csv`` and, when ``heatmaps`` is
    set, one PGM per probe patch built from its first slot.  Returns the
    fraction of frames whose summary peaks at the target patch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = net.config.embed.grid
    if heatmaps:
        (out / "heatmaps").mkdir(exist_ok=True)
    hits = 0
    with open(out / "summaries.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "patch_index", "argmax"] + [f"m{j}" for j in range(grid * grid)])
        for start in range(0, len(probe_set), 36):
            chunk = probe_set[start:start + 36]
            images = np.stack([s.image for s in chunk])[:, None].astype(np.float64)
            maps = _prosecution_trace(net, images)[block]["coarse"]
            for b, s in enumerate(chunk):
                summary = coarse_summary(maps[b], grid)
                target = int(s.metadata["patch_index"])
                top = int(np.argmax(summary))
                hits += top == target
                frame = int(s.metadata.get("frame", start + b))
                w.writerow([frame, target, top] + [repr(float(v)) for v in summary.ravel()])
                if heatmaps and int(s.metadata.get("slot", 0)) == 0:
                    write_heatmap(out / "heatmaps" / f"patch{target:03d}.pgm", summary)
    series = collect_feature_series(net, probe_set, block)
    series.write_csv(out / "series.csv")
    spectrum = dft_power(series)
    spectrum.write_csv(out / "spectrum.csv")
    return {
        "frames": len(probe_set),
        "localization_rate": hits / max(len(probe_set), 1),
        "dominant_period": spectrum.dominant_period,
    }
