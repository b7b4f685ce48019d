"""Post-hoc confidence mapping trained by minimizing calibration error directly.

The mapping subtracts a learnable per-bin offset from the winning score,

    w = clamp(v - alpha1 * psi_k - alpha2(k) * hv, 0, 1),

where k is the bin of v (fixed bins, so membership never moves during
training) and hv is the per-sample ambiguity from truth discovery. psi is
trained by mini-batch gradient descent on the histogram ECE or the KDE ECE of
the mapped batch; gradients are analytic (chain rule through the mapping, with
subgradient 0 at absolute-value kinks and clamp saturation) or central finite
differences. Compositional training warm-starts the KDE-loss phase from the
histogram-loss solution. A keep-best snapshot guarantees the returned weights
never score worse than the initialization on the full calibration set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .datamodel import argmax_tiebreak_rows, softmax
from .metrics import (
    NLL_FLOOR,
    BinningScheme,
    KdeConfig,
    ScoredSamples,
    build_bins,
    ece,
    ece_kde,
    kde_state,
    ks_error,
    brier,
    nll,
    silverman_bandwidth,
)


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the epoch and the weight snapshot."""

    def __init__(self, epoch: int, psi: np.ndarray):
        self.epoch = epoch
        self.psi = np.array(psi)
        super().__init__(f"non-finite loss at epoch {epoch}; psi snapshot attached")


@dataclass(frozen=True)
class AttenuationWeights:
    """A fitted confidence mapping: per-bin offsets over a frozen binning."""

    bins: BinningScheme
    psi: np.ndarray
    alpha1: float = 1.0
    alpha2_mode: str = "per_bin_psi"
    alpha2_value: float = 0.0
    loss_trace: tuple[float, ...] = ()

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=np.float64)
        if psi.shape != (self.bins.num_bins,):
            raise ValueError(
                f"psi shape {psi.shape} does not match {self.bins.num_bins} bins"
            )
        if not np.isfinite(psi).all():
            raise ValueError("non-finite attenuation weight")
        if self.alpha2_mode not in ("zero", "constant", "per_bin_psi"):
            raise ValueError(f"unknown alpha2_mode {self.alpha2_mode!r}")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "loss_trace", tuple(float(x) for x in self.loss_trace))


def identity_weights(
    bins: BinningScheme, alpha1: float = 1.0, alpha2_mode: str = "per_bin_psi"
) -> AttenuationWeights:
    """Zero offsets: the mapping is the identity regardless of mode."""
    return AttenuationWeights(bins, np.zeros(bins.num_bins), alpha1, alpha2_mode)


def apply_mapping(confidence, hv, weights: AttenuationWeights):
    """Map raw confidence(s) through the attenuation weights, clamped to [0, 1].

    `hv` may be None (treated as zero), a scalar, or an array matching
    `confidence`. Scalar in, scalar out.
    """
    v = np.asarray(confidence, dtype=np.float64)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    if hv is None:
        ambig = np.zeros_like(v)
    else:
        ambig = np.broadcast_to(np.asarray(hv, dtype=np.float64), v.shape)
    kappa = weights.bins.assign(v)
    psi_k = weights.psi[kappa]
    if weights.alpha2_mode == "per_bin_psi":
        a2 = psi_k
    elif weights.alpha2_mode == "constant":
        a2 = weights.alpha2_value
    else:
        a2 = 0.0
    w = np.clip(v - weights.alpha1 * psi_k - a2 * ambig, 0.0, 1.0)
    return float(w[0]) if scalar else w


@dataclass(frozen=True)
class TrainConfig:
    """Settings for one gradient-descent fit (Algorithm: one batch per epoch)."""

    epochs: int = 70
    batch_size: int = 1000
    learning_rate: float = 0.02
    loss: str = "hist_ece"
    gradient_mode: str = "analytic"
    fd_step: float = 1e-5
    seed: int = 0
    num_bins: int = 15
    alpha1: float = 1.0
    alpha2_mode: str = "per_bin_psi"
    alpha2_value: float = 0.0
    kde: KdeConfig = field(default_factory=KdeConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if not (self.learning_rate > 0.0):
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.loss not in ("hist_ece", "kde_ece"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.gradient_mode not in ("analytic", "finite_difference"):
            raise ValueError(f"unknown gradient_mode {self.gradient_mode!r}")
        if not (self.fd_step > 0.0):
            raise ValueError(f"fd_step must be positive, got {self.fd_step}")
        if self.num_bins < 1:
            raise ValueError(f"num_bins must be >= 1, got {self.num_bins}")
        if self.alpha2_mode not in ("zero", "constant", "per_bin_psi"):
            raise ValueError(f"unknown alpha2_mode {self.alpha2_mode!r}")


@dataclass(frozen=True)
class MappingBatch:
    """Samples prepared for training: scores, ambiguity, frozen bin indices."""

    confidence: np.ndarray
    hv: np.ndarray
    correct: np.ndarray
    bin_index: np.ndarray

    def __len__(self) -> int:
        return self.confidence.size

    def subset(self, idx) -> "MappingBatch":
        return MappingBatch(
            self.confidence[idx], self.hv[idx], self.correct[idx], self.bin_index[idx]
        )


def bind_bins(scores: ScoredSamples, hv, bins: BinningScheme) -> MappingBatch:
    """Attach ambiguity values and bin indices (a function of v only) to scores."""
    conf = scores.confidence
    if hv is None:
        ambig = np.zeros_like(conf)
    else:
        ambig = np.asarray(hv, dtype=np.float64)
        if ambig.shape != conf.shape:
            raise ValueError(f"hv shape {ambig.shape} does not match {conf.shape}")
        if not np.isfinite(ambig).all():
            raise ValueError("non-finite hv")
    return MappingBatch(conf, ambig, scores.correct, bins.assign(conf))


def _map_batch(psi: np.ndarray, batch: MappingBatch, cfg: TrainConfig):
    """Mapped confidences plus d(w)/d(psi of own bin), zero where clamped."""
    psi_k = psi[batch.bin_index]
    if cfg.alpha2_mode == "per_bin_psi":
        raw = batch.confidence - cfg.alpha1 * psi_k - psi_k * batch.hv
        slope = -(cfg.alpha1 + batch.hv)
    elif cfg.alpha2_mode == "constant":
        raw = batch.confidence - cfg.alpha1 * psi_k - cfg.alpha2_value * batch.hv
        slope = np.full_like(raw, -cfg.alpha1)
    else:
        raw = batch.confidence - cfg.alpha1 * psi_k
        slope = np.full_like(raw, -cfg.alpha1)
    active = (raw > 0.0) & (raw < 1.0)
    return np.clip(raw, 0.0, 1.0), np.where(active, slope, 0.0)


def _hist_loss(psi, batch, cfg, num_bins):
    w, dwdpsi = _map_batch(psi, batch, cfg)
    n = len(batch)
    counts = np.bincount(batch.bin_index, minlength=num_bins).astype(np.float64)
    conf_sum = np.bincount(batch.bin_index, weights=w, minlength=num_bins)
    hit_sum = np.bincount(
        batch.bin_index, weights=batch.correct.astype(np.float64), minlength=num_bins
    )
    filled = counts > 0
    safe = np.where(filled, counts, 1.0)
    gap = np.where(filled, hit_sum / safe - conf_sum / safe, 0.0)
    loss = float((counts[filled] / n) @ np.abs(gap[filled]))
    # d loss / d psi_b = sign(conf_b - acc_b) / n * sum_{j in b} dw_j/dpsi_b
    slope_sum = np.bincount(batch.bin_index, weights=dwdpsi, minlength=num_bins)
    grad = np.sign(-gap) * slope_sum / n
    return loss, grad


def _kde_loss(psi, batch, cfg, num_bins, want_grad):
    w, dwdpsi = _map_batch(psi, batch, cfg)
    mapped = ScoredSamples(w, batch.correct)
    state = kde_state(mapped, cfg.kde, want_deriv=want_grad)
    resid = state.grid - state.acc_smooth
    integrand = np.where(state.valid, np.abs(resid) * state.density, 0.0)
    loss = float(np.trapezoid(integrand, state.grid))
    if not want_grad:
        return loss, None
    n = len(batch)
    h = state.bandwidth
    denom = state.density * (n * h)
    safe_denom = np.where(state.valid, denom, 1.0)
    # dACC(g)/dw_j and d density(g)/dw_j, both (grid, n)
    dacc = (state.kprime / h) * (state.acc_smooth[:, None] - batch.correct[None, :]) / safe_denom[:, None]
    ddens = -state.kprime / (n * h * h)
    contrib = (
        np.sign(resid)[:, None] * (-dacc) * state.density[:, None]
        + np.abs(resid)[:, None] * ddens
    )
    contrib[~state.valid] = 0.0
    # uniform-grid trapezoid weights
    step = state.grid[1] - state.grid[0]
    tw = np.full(state.grid.size, step)
    tw[0] = tw[-1] = step / 2.0
    dloss_dw = tw @ contrib
    grad = np.bincount(batch.bin_index, weights=dloss_dw * dwdpsi, minlength=num_bins)
    return loss, grad


def _loss_only(psi, batch, cfg) -> float:
    if cfg.loss == "hist_ece":
        return _hist_loss(psi, batch, cfg, psi.size)[0]
    return _kde_loss(psi, batch, cfg, psi.size, want_grad=False)[0]


def loss_and_gradient(
    psi: np.ndarray, batch: MappingBatch, cfg: TrainConfig
) -> tuple[float, np.ndarray]:
    """Loss of the mapped batch and its gradient w.r.t. the bin offsets.

    Bin membership comes from the batch (precomputed from v) and is constant
    in psi. The analytic path applies the chain rule through the mapping; the
    finite-difference path perturbs each offset by +-fd_step. An auto (rule
    of thumb) bandwidth is resolved once from the current mapped confidences
    and held fixed within the call, so no gradient flows through bandwidth
    selection.
    """
    psi = np.asarray(psi, dtype=np.float64)
    if len(batch) == 0:
        raise ValueError("empty batch")
    if cfg.loss == "kde_ece" and cfg.kde.bandwidth == "auto":
        w, _ = _map_batch(psi, batch, cfg)
        cfg = replace(cfg, kde=replace(cfg.kde, bandwidth=silverman_bandwidth(w)))
    if cfg.gradient_mode == "finite_difference":
        loss = _loss_only(psi, batch, cfg)
        grad = np.zeros_like(psi)
        for b in range(psi.size):
            bumped = psi.copy()
            bumped[b] = psi[b] + cfg.fd_step
            up = _loss_only(bumped, batch, cfg)
            bumped[b] = psi[b] - cfg.fd_step
            down = _loss_only(bumped, batch, cfg)
            grad[b] = (up - down) / (2.0 * cfg.fd_step)
        return loss, grad
    if cfg.loss == "hist_ece":
        return _hist_loss(psi, batch, cfg, psi.size)
    loss, grad = _kde_loss(psi, batch, cfg, psi.size, want_grad=True)
    return loss, grad


def fit(
    scores: ScoredSamples,
    cfg: TrainConfig = TrainConfig(),
    hv=None,
    init=None,
    bins: BinningScheme | None = None,
) -> AttenuationWeights:
    """Mini-batch gradient descent on the calibration loss.

    Bins are built once (equal-mass) from the calibration confidences unless
    supplied. Each epoch draws one uniform mini-batch without replacement from
    a fresh seeded shuffle and takes one step. The loss trace records the
    full-calibration-set loss at init and after every epoch; the best-seen
    weights by that loss are returned, so the result is never worse than the
    initialization.
    """
    if bins is None:
        bins = build_bins(scores.confidence, cfg.num_bins, policy="equal_mass")
    batch_all = bind_bins(scores, hv, bins)
    if init is None:
        psi = np.zeros(bins.num_bins)
    else:
        psi = np.array(init, dtype=np.float64)
        if psi.shape != (bins.num_bins,):
            raise ValueError(f"init shape {psi.shape} does not match {bins.num_bins} bins")
    rng = np.random.default_rng(cfg.seed)
    n = len(scores)
    take = min(cfg.batch_size, n)
    full = _loss_only(psi, batch_all, cfg)
    if not math.isfinite(full):
        raise TrainingDivergedError(0, psi)
    trace = [full]
    best_loss, best_psi = full, psi.copy()
    for epoch in range(1, cfg.epochs + 1):
        sel = rng.permutation(n)[:take]
        loss, grad = loss_and_gradient(psi, batch_all.subset(sel), cfg)
        if not (math.isfinite(loss) and np.isfinite(grad).all()):
            raise TrainingDivergedError(epoch, psi)
        psi = psi - cfg.learning_rate * grad
        full = _loss_only(psi, batch_all, cfg)
        if not math.isfinite(full):
            raise TrainingDivergedError(epoch, psi)
        trace.append(full)
        if full < best_loss:
            best_loss, best_psi = full, psi.copy()
    return AttenuationWeights(
        bins=bins,
        psi=best_psi,
        alpha1=cfg.alpha1,
        alpha2_mode=cfg.alpha2_mode,
        alpha2_value=cfg.alpha2_value,
        loss_trace=tuple(trace),
    )


def fit_compositional(
    scores: ScoredSamples,
    hist_cfg: TrainConfig,
    kde_cfg: TrainConfig,
    hv=None,
    bins: BinningScheme | None = None,
) -> AttenuationWeights:
    """Histogram-loss fit from zeros, then a KDE-loss fit warm-started from it.

    Both phases share one frozen binning and one set of mapping
    hyperparameters; the combined loss trace concatenates the two phases.
    """
    if hist_cfg.loss != "hist_ece":
        raise ValueError(f"hist phase must use hist_ece loss, got {hist_cfg.loss!r}")
    if kde_cfg.loss != "kde_ece":
        raise ValueError(f"kde phase must use kde_ece loss, got {kde_cfg.loss!r}")
    same = ("alpha1", "alpha2_mode", "alpha2_value", "num_bins")
    for name in same:
        if getattr(hist_cfg, name) != getattr(kde_cfg, name):
            raise ValueError(f"hist and kde phases disagree on {name}")
    if bins is None:
        bins = build_bins(scores.confidence, hist_cfg.num_bins, policy="equal_mass")
    coarse = fit(scores, hist_cfg, hv=hv, bins=bins)
    fine = fit(scores, kde_cfg, hv=hv, init=coarse.psi, bins=bins)
    return replace(fine, loss_trace=coarse.loss_trace + fine.loss_trace)


class TemperatureFit(NamedTuple):
    temperature: float
    nll: float


def fit_temperature(probs: np.ndarray, labels: np.ndarray) -> TemperatureFit:
    """Single-parameter temperature scaling fitted by golden-section search.

    Probabilities are floored and logged back to logits; NLL of
    softmax(logits / T) is minimized over T in [0.05, 20] until the bracket
    shrinks below 1e-4. Rescaling by a positive temperature is monotone, so
    the argmax (and accuracy) never change.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    logits = np.log(np.maximum(probs, NLL_FLOOR))

    def objective(temp: float) -> float:
        return nll(softmax(logits / temp, axis=1), labels)

    lo, hi = 0.05, 20.0
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    left = hi - invphi * (hi - lo)
    right = lo + invphi * (hi - lo)
    f_left, f_right = objective(left), objective(right)
    while hi - lo > 1e-4:
        if f_left < f_right:
            hi, right, f_right = right, left, f_left
            left = hi - invphi * (hi - lo)
            f_left = objective(left)
        else:
            lo, left, f_left = left, right, f_right
            right = lo + invphi * (hi - lo)
            f_right = objective(right)
    temp = (lo + hi) / 2.0
    return TemperatureFit(temperature=temp, nll=objective(temp))


def evaluate_pipeline(
    weights: AttenuationWeights,
    scores: ScoredSamples,
    hv=None,
    probs: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    kde: KdeConfig | None = None,
    num_classes: int | None = None,
) -> dict:
    """Before/after metric report for a mapping on held-out samples.

    ECE uses the frozen bins carried by the weights for both phases. The
    mapping acts on the scalar confidence only, so accuracy is identical
    before and after; nll/brier require full probability vectors and are
    reported for the unmapped predictions only.
    """
    kde_cfg = kde if kde is not None else KdeConfig()
    if num_classes is None and probs is not None:
        num_classes = probs.shape[1]
    mapped = ScoredSamples(apply_mapping(scores.confidence, hv, weights), scores.correct)
    acc = float(scores.correct.mean())
    report = {
        "acc": {"before": acc, "after": acc},
        "ece": {
            "before": ece(scores, weights.bins),
            "after": ece(mapped, weights.bins),
        },
        "ece_kde": {
            "before": ece_kde(scores, kde_cfg, num_classes=num_classes),
            "after": ece_kde(mapped, kde_cfg, num_classes=num_classes),
        },
        "ks": {"before": ks_error(scores), "after": ks_error(mapped)},
        "nll": {"before": nll(probs, labels) if probs is not None else None},
        "brier": {"before": brier(probs, labels) if probs is not None else None},
    }
    return report


def predicted_scores(probs: np.ndarray, labels: np.ndarray) -> ScoredSamples:
    """Winning scores and correctness of row-wise predictions."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    preds = argmax_tiebreak_rows(probs)
    rows = np.arange(probs.shape[0])
    return ScoredSamples(probs[rows, preds], preds == labels)
