"""Calibration metrics over scored predictions.

A scored prediction is a confidence (the winning score, possibly remapped)
plus a correctness flag. Histogram ECE bins confidences into a frozen
BinningScheme (half-open bins, last bin right-closed); the KDE variant
replaces the histogram with a kernel density and integrates
|w - smoothed_accuracy(w)| * density(w) by trapezoid quadrature.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .datamodel import argmax_tiebreak_rows

NLL_FLOOR = 1e-12
KDE_DENOM_FLOOR = 1e-30
BANDWIDTH_FLOOR = 1e-3


@dataclass(frozen=True)
class ScoredSamples:
    """Parallel arrays of confidences and correctness flags."""

    confidence: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        conf = np.asarray(self.confidence, dtype=np.float64)
        corr = np.asarray(self.correct, dtype=bool)
        if conf.ndim != 1 or corr.shape != conf.shape:
            raise ValueError(
                f"confidence {conf.shape} and correct {corr.shape} must be equal-length 1-D"
            )
        if conf.size < 1:
            raise ValueError("need at least one sample")
        if not np.isfinite(conf).all():
            raise ValueError("non-finite confidence")
        object.__setattr__(self, "confidence", conf)
        object.__setattr__(self, "correct", corr)

    def __len__(self) -> int:
        return self.confidence.size

    def subset(self, idx) -> "ScoredSamples":
        return ScoredSamples(self.confidence[idx], self.correct[idx])


@dataclass(frozen=True)
class BinningScheme:
    """Frozen partition of the confidence axis into half-open bins.

    endpoints has B+1 strictly ascending entries; bin b spans
    [endpoints[b], endpoints[b+1]), except the last bin which is right-closed.
    Confidences outside the covered range are assigned to the nearest end bin.
    requested_bins records the bin count asked for before tied quantiles were
    deduplicated.
    """

    endpoints: np.ndarray
    policy: str = "explicit"
    requested_bins: int = 0

    def __post_init__(self):
        eps = np.asarray(self.endpoints, dtype=np.float64)
        if eps.ndim != 1 or eps.size < 2:
            raise ValueError(f"need at least two endpoints, got shape {eps.shape}")
        if not (np.diff(eps) > 0).all():
            raise ValueError("endpoints must be strictly ascending")
        object.__setattr__(self, "endpoints", eps)
        if self.requested_bins == 0:
            object.__setattr__(self, "requested_bins", eps.size - 1)

    @property
    def num_bins(self) -> int:
        return self.endpoints.size - 1

    def assign(self, confidence) -> np.ndarray:
        """Bin index per confidence, out-of-range values clamped to end bins."""
        conf = np.asarray(confidence, dtype=np.float64)
        idx = np.searchsorted(self.endpoints, conf, side="right") - 1
        return np.clip(idx, 0, self.num_bins - 1)

    def out_of_range(self, confidence) -> int:
        """How many confidences fell outside [endpoints[0], endpoints[-1]]."""
        conf = np.asarray(confidence, dtype=np.float64)
        return int(((conf < self.endpoints[0]) | (conf > self.endpoints[-1])).sum())


def build_bins(confidence, num_bins: int, policy: str = "equal_mass") -> BinningScheme:
    """Construct a frozen binning from observed confidences.

    equal_mass places interior endpoints at empirical quantiles ('higher'
    method) so bins hold equal counts; equal_width partitions [min, 1]
    uniformly. The top endpoint is pinned to 1.0 either way. Tied quantiles
    collapse (the effective bin count drops, with a warning), as does an
    all-identical confidence set.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    if conf.size < 1:
        raise ValueError("need at least one confidence to build bins")
    if not np.isfinite(conf).all():
        raise ValueError("non-finite confidence")
    if num_bins < 1:
        raise ValueError(f"num_bins must be >= 1, got {num_bins}")
    lo = float(conf.min())
    if lo == float(conf.max()):
        warnings.warn("all confidences identical; falling back to a single bin")
        if lo >= 1.0:
            lo = 0.0
        return BinningScheme(np.array([lo, 1.0]), policy=policy, requested_bins=num_bins)
    if policy == "equal_mass":
        interior = np.quantile(conf, np.arange(1, num_bins) / num_bins, method="higher")
        raw = np.concatenate(([lo], interior, [1.0]))
        kept = [raw[0]]
        for e in raw[1:]:
            if e > kept[-1]:
                kept.append(float(e))
        if kept[-1] < 1.0:
            kept[-1] = 1.0
        endpoints = np.asarray(kept)
        if endpoints.size - 1 < num_bins:
            warnings.warn(
                f"tied quantiles reduced {num_bins} requested bins to {endpoints.size - 1}"
            )
    elif policy == "equal_width":
        endpoints = np.linspace(lo, 1.0, num_bins + 1)
    else:
        raise ValueError(f"unknown binning policy {policy!r}")
    return BinningScheme(endpoints, policy=policy, requested_bins=num_bins)


def _bin_stats(samples: ScoredSamples, bins: BinningScheme):
    """Per-bin (count, mean confidence, accuracy); empty bins give nan means."""
    idx = bins.assign(samples.confidence)
    counts = np.bincount(idx, minlength=bins.num_bins).astype(np.float64)
    conf_sum = np.bincount(idx, weights=samples.confidence, minlength=bins.num_bins)
    hit_sum = np.bincount(idx, weights=samples.correct.astype(np.float64), minlength=bins.num_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        avg_conf = conf_sum / counts
        acc = hit_sum / counts
    return counts, avg_conf, acc


def ece(samples: ScoredSamples, bins: BinningScheme) -> float:
    """Histogram expected calibration error over a frozen binning.

    Weighted by bin population: sum_b (n_b / N) |accuracy_b - confidence_b|.
    """
    counts, avg_conf, acc = _bin_stats(samples, bins)
    filled = counts > 0
    return float((counts[filled] / len(samples)) @ np.abs(acc[filled] - avg_conf[filled]))


@dataclass(frozen=True)
class BinRow:
    """One reliability-diagram row; avg_conf/acc are None for empty bins."""

    bin_low: float
    bin_high: float
    count: int
    avg_conf: float | None
    acc: float | None


def reliability_diagram(samples: ScoredSamples, bins: BinningScheme) -> list[BinRow]:
    """Tabulate count, mean confidence, and accuracy per bin."""
    counts, avg_conf, acc = _bin_stats(samples, bins)
    rows = []
    for b in range(bins.num_bins):
        n = int(counts[b])
        rows.append(
            BinRow(
                bin_low=float(bins.endpoints[b]),
                bin_high=float(bins.endpoints[b + 1]),
                count=n,
                avg_conf=float(avg_conf[b]) if n else None,
                acc=float(acc[b]) if n else None,
            )
        )
    return rows


def reliability_csv(rows: list[BinRow]) -> str:
    """Serialize diagram rows to CSV (6-decimal fixed, empty fields when absent)."""
    lines = ["bin_low,bin_high,count,avg_conf,acc"]
    for r in rows:
        conf = f"{r.avg_conf:.6f}" if r.avg_conf is not None else ""
        acc = f"{r.acc:.6f}" if r.acc is not None else ""
        lines.append(f"{r.bin_low:.6f},{r.bin_high:.6f},{r.count},{conf},{acc}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class KdeConfig:
    """Kernel, bandwidth, and quadrature settings for the KDE calibration error.

    bandwidth "auto" uses the Silverman rule floored at 1e-3. A None
    integration_range means "decide from context": callers that know the class
    count integrate over [1/L, 1] (a winning score cannot fall below 1/L),
    otherwise [0, 1].
    """

    kernel: str = "triweight"
    bandwidth: float | str = "auto"
    grid_points: int = 512
    integration_range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kernel not in ("triweight", "gaussian"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.bandwidth != "auto":
            if not (float(self.bandwidth) > 0.0):
                raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.grid_points < 64:
            raise ValueError(f"grid_points must be >= 64, got {self.grid_points}")
        if self.integration_range is not None:
            lo, hi = self.integration_range
            if not (lo < hi):
                raise ValueError(f"empty integration range ({lo}, {hi})")


def silverman_bandwidth(values) -> float:
    """Rule-of-thumb bandwidth 1.06 * std * N^(-1/5), floored at 1e-3."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 2:
        return BANDWIDTH_FLOOR
    width = 1.06 * float(arr.std(ddof=1)) * arr.size ** (-1.0 / 5.0)
    return max(width, BANDWIDTH_FLOOR)


def kernel_values(u: np.ndarray, kernel: str) -> np.ndarray:
    if kernel == "triweight":
        w = 1.0 - np.square(u)
        return np.where(np.abs(u) <= 1.0, (35.0 / 32.0) * w * w * w, 0.0)
    return np.exp(-0.5 * np.square(u)) / np.sqrt(2.0 * np.pi)


def kernel_derivs(u: np.ndarray, kernel: str) -> np.ndarray:
    if kernel == "triweight":
        w = 1.0 - np.square(u)
        return np.where(np.abs(u) <= 1.0, -(105.0 / 16.0) * u * w * w, 0.0)
    return -u * kernel_values(u, kernel)


class KdeState(NamedTuple):
    """Intermediate KDE quantities shared by the metric and its gradient."""

    grid: np.ndarray
    density: np.ndarray
    acc_smooth: np.ndarray
    valid: np.ndarray
    kmat: np.ndarray
    kprime: np.ndarray | None
    bandwidth: float


def kde_state(
    samples: ScoredSamples,
    cfg: KdeConfig = KdeConfig(),
    num_classes: int | None = None,
    want_deriv: bool = False,
) -> KdeState:
    conf = samples.confidence
    n = conf.size
    h = silverman_bandwidth(conf) if cfg.bandwidth == "auto" else float(cfg.bandwidth)
    if cfg.integration_range is not None:
        lo, hi = cfg.integration_range
    elif num_classes is not None:
        lo, hi = 1.0 / num_classes, 1.0
    else:
        lo, hi = 0.0, 1.0
    grid = np.linspace(lo, hi, cfg.grid_points)
    u = (grid[:, None] - conf[None, :]) / h
    kmat = kernel_values(u, cfg.kernel)
    denom = kmat.sum(axis=1)
    density = denom / (n * h)
    valid = denom >= KDE_DENOM_FLOOR
    safe = np.where(valid, denom, 1.0)
    acc_smooth = np.where(valid, (kmat @ samples.correct.astype(np.float64)) / safe, 0.0)
    kprime = kernel_derivs(u, cfg.kernel) if want_deriv else None
    return KdeState(grid, density, acc_smooth, valid, kmat, kprime, h)


def ece_kde(
    samples: ScoredSamples, cfg: KdeConfig = KdeConfig(), num_classes: int | None = None
) -> float:
    """Kernel-density calibration error.

    Integrates |w - acc_smooth(w)| * density(w) over the integration range,
    where acc_smooth is the kernel-weighted accuracy around w. Grid points
    whose kernel mass underflows contribute nothing.
    """
    state = kde_state(samples, cfg, num_classes=num_classes)
    integrand = np.where(
        state.valid, np.abs(state.grid - state.acc_smooth) * state.density, 0.0
    )
    return float(np.trapezoid(integrand, state.grid))


def ks_error(samples: ScoredSamples) -> float:
    """Max gap between cumulative accuracy and cumulative confidence.

    Samples are ordered by ascending confidence; the statistic is the largest
    absolute difference between the two running means (both divided by N).
    """
    order = np.argsort(samples.confidence, kind="stable")
    n = len(samples)
    cum_acc = np.cumsum(samples.correct[order]) / n
    cum_conf = np.cumsum(samples.confidence[order]) / n
    return float(np.abs(cum_acc - cum_conf).max())


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy with deterministic tie handling (smallest tied index)."""
    preds = argmax_tiebreak_rows(np.asarray(probs, dtype=np.float64))
    return float((preds == np.asarray(labels, dtype=np.int64)).mean())


def nll(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood with probabilities floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(np.maximum(picked, NLL_FLOOR)).mean())


def brier(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared distance between prediction and one-hot label."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    sq = np.square(probs).sum(axis=1)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float((sq - 2.0 * picked + 1.0).mean())
