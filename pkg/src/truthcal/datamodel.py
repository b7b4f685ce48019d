"""Core data types and simplex arithmetic shared by every other module.

Probability vectors live on the (L-1)-simplex and are always held as float64.
Validation is tolerant to harmless float noise: componentwise and sum
violations up to 1e-9 are accepted as-is, violations up to 1e-6 are repaired
by renormalization (and counted), anything larger is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SIMPLEX_TOL = 1e-9
RENORM_TOL = 1e-6
TIE_TOL = 1e-12


class SimplexValidationError(ValueError):
    """A value claimed to be a probability vector is too far off the simplex."""


def _plain(idx) -> tuple:
    # keep numpy scalar reprs out of error messages
    return tuple(int(v) for v in np.atleast_1d(idx))


def _validate_rows(rows: np.ndarray, what: str) -> tuple[np.ndarray, int]:
    """Validate/repair a (..., L) stack of probability vectors.

    Returns the repaired float64 array and the number of rows that needed
    renormalization.
    """
    arr = np.array(rows, dtype=np.float64)
    if arr.shape[-1] < 2:
        raise SimplexValidationError(f"{what}: need at least 2 classes, got {arr.shape[-1]}")
    if not np.isfinite(arr).all():
        idx = _plain(np.argwhere(~np.isfinite(arr))[0])
        raise SimplexValidationError(f"{what}: non-finite component at index {idx}")
    if (arr < -RENORM_TOL).any():
        idx = np.argwhere(arr < -RENORM_TOL)[0]
        raise SimplexValidationError(
            f"{what}: component {arr[tuple(idx)]:.3e} below 0 at index {_plain(idx)}"
        )
    if (arr > 1.0 + RENORM_TOL).any():
        idx = np.argwhere(arr > 1.0 + RENORM_TOL)[0]
        raise SimplexValidationError(
            f"{what}: component {arr[tuple(idx)]:.6f} above 1 at index {_plain(idx)}"
        )
    clipped = arr < 0.0
    arr[clipped] = 0.0
    sums = arr.sum(axis=-1)
    off = np.abs(sums - 1.0)
    if (off > RENORM_TOL).any():
        idx = np.argwhere(off > RENORM_TOL)[0]
        raise SimplexValidationError(
            f"{what}: components sum to {sums[tuple(idx)]:.9f} at row {_plain(idx)}"
        )
    fix = (off > SIMPLEX_TOL) | clipped.any(axis=-1)
    n_fixed = int(fix.sum())
    if n_fixed:
        arr[fix] = arr[fix] / sums[fix][..., None]
    return arr, n_fixed


def as_prob_vector(values) -> np.ndarray:
    """Coerce to a validated float64 probability vector (renormalizing noise)."""
    arr, _ = _validate_rows(np.atleast_1d(np.asarray(values, dtype=np.float64)), "probability vector")
    return arr


def softmax(logits, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along `axis`.

    Shifts by the max so extreme logits (e.g. 1000) do not overflow. Non-finite
    inputs are rejected with the offending index in the message.
    """
    arr = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(arr).all():
        idx = np.argwhere(~np.isfinite(arr))[0]
        raise ValueError(f"softmax: non-finite logit at index {_plain(idx)}")
    shifted = arr - arr.max(axis=axis, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=axis, keepdims=True)


def argmax_tiebreak(z, prefer: int | None = None) -> int:
    """Index of the largest component, ties resolved deterministically.

    Components within TIE_TOL of the max count as tied. Returns the smallest
    tied index, unless `prefer` is itself tied, in which case `prefer` wins.
    """
    arr = np.asarray(z, dtype=np.float64)
    top = arr.max()
    if prefer is not None and arr[prefer] >= top - TIE_TOL:
        return int(prefer)
    return int(np.flatnonzero(arr >= top - TIE_TOL)[0])


def argmax_tiebreak_rows(probs: np.ndarray, prefer=None) -> np.ndarray:
    """Vectorized argmax_tiebreak over the rows of an (N, L) array.

    `prefer` may be None, a scalar class, or an (N,) array of per-row classes.
    """
    probs = np.asarray(probs, dtype=np.float64)
    near = probs >= probs.max(axis=1, keepdims=True) - TIE_TOL
    first = near.argmax(axis=1)
    if prefer is None:
        return first
    pref = np.broadcast_to(np.asarray(prefer, dtype=np.int64), (probs.shape[0],))
    hit = near[np.arange(probs.shape[0]), pref]
    return np.where(hit, pref, first)


@dataclass(frozen=True)
class PredictionOutcome:
    """What a single probability vector predicts for a labeled sample."""

    winning_score: float
    predicted_class: int
    correct: bool


def outcome(probs, label: int, prefer: int | None = None) -> PredictionOutcome:
    """Score one probability vector against its label."""
    vec = as_prob_vector(probs)
    cls = argmax_tiebreak(vec, prefer=prefer)
    return PredictionOutcome(
        winning_score=float(vec[cls]), predicted_class=cls, correct=bool(cls == label)
    )


@dataclass(frozen=True)
class EnsembleTensor:
    """Stacked per-source probabilistic predictions for one labeled dataset.

    predictions has shape (S, N, L): S sources, N samples, L classes. Every
    (s, i) row is validated as a probability vector on construction;
    `renormalized_rows` counts how many rows needed repair.
    """

    predictions: np.ndarray
    labels: np.ndarray
    source_ids: tuple[str, ...] = ()
    renormalized_rows: int = field(default=0, compare=False)

    def __post_init__(self):
        preds = np.asarray(self.predictions, dtype=np.float64)
        if preds.ndim != 3:
            raise SimplexValidationError(
                f"predictions must be (sources, samples, classes), got shape {preds.shape}"
            )
        s, n, l = preds.shape
        if s < 1 or n < 1:
            raise SimplexValidationError(f"need at least one source and one sample, got {preds.shape}")
        preds, fixed = _validate_rows(preds, "predictions")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (n,):
            raise SimplexValidationError(
                f"labels shape {labels.shape} does not match {n} samples"
            )
        if labels.size and (labels.min() < 0 or labels.max() >= l):
            bad = labels[(labels < 0) | (labels >= l)][0]
            raise SimplexValidationError(f"label {bad} outside [0, {l})")
        ids = tuple(self.source_ids) if self.source_ids else tuple(f"s{k:02d}" for k in range(s))
        if len(ids) != s:
            raise SimplexValidationError(f"{len(ids)} source ids for {s} sources")
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source_ids", ids)
        object.__setattr__(self, "renormalized_rows", fixed)

    @property
    def num_sources(self) -> int:
        return self.predictions.shape[0]

    @property
    def num_samples(self) -> int:
        return self.predictions.shape[1]

    @property
    def num_classes(self) -> int:
        return self.predictions.shape[2]

    @cached_property
    def mean_predictions(self) -> np.ndarray:
        """(N, L) per-sample mean over sources (the plain ensemble prediction)."""
        return self.predictions.mean(axis=0)


def ensemble_mean(ens: EnsembleTensor, i: int) -> np.ndarray:
    """Mean of the S source predictions for sample i."""
    return ens.predictions[:, i, :].mean(axis=0)
