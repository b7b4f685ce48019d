"""Geometric truth discovery over ensemble predictions on the simplex.

Each sample is seen as S source opinions z_1..z_S (probability vectors). The
consensus ("truth") vector z* and per-source reliabilities omega solve

    minimize_{z*, omega}  sum_s omega_s ||z* - z_s||^2
    subject to            sum_s exp(-omega_s) = 1,

by alternating minimization: closed-form reliabilities for fixed z*, then the
reliability-weighted mean for fixed omega, until the squared displacement of
z* falls below epsilon. An accuracy-preserving variant projects each iterate
onto the set of vectors whose argmax equals the ensemble-mean argmax.

exp(-omega_s) is the uncertainty mass assigned to source s; the entropy of the
squared-distance profile times the total squared distance gives a scalar
ambiguity score (entropy_geometric_variance) used to regularize downstream
confidence mapping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datamodel import EnsembleTensor, _validate_rows, argmax_tiebreak

DEFAULT_EPSILON = math.exp(-8.0)
# square of the default distance floor; below this V is float noise
HV_VARIANCE_FLOOR = 1e-24


class DegenerateReliabilityError(ValueError):
    """Reliabilities sum to zero or less; the weighted mean is undefined."""


class BatchDiscoveryError(RuntimeError):
    """One or more samples failed truth discovery; indices are attached."""

    def __init__(self, failures: list[tuple[int, Exception]]):
        self.indices = [i for i, _ in failures]
        first = failures[0][1]
        super().__init__(
            f"truth discovery failed for {len(failures)} sample(s) "
            f"{self.indices[:10]}{'...' if len(failures) > 10 else ''}: {first}"
        )


@dataclass(frozen=True)
class TruthConfig:
    """Knobs for the alternating truth-discovery loop.

    epsilon is compared against the squared displacement of the truth vector
    between iterations. distance_power selects the exponent of the distance in
    the reliability denominator: 2 is the exact constrained minimizer (the
    uncertainties then sum to 1 and the objective is non-increasing), 1
    reproduces the looser printed update.
    """

    epsilon: float = DEFAULT_EPSILON
    max_iters: int = 50
    variant: str = "vanilla"
    distance_power: int = 2
    distance_floor: float = 1e-12

    def __post_init__(self):
        if not (self.epsilon > 0.0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.variant not in ("vanilla", "accuracy_preserving"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.distance_power not in (1, 2):
            raise ValueError(f"distance_power must be 1 or 2, got {self.distance_power}")
        if not (self.distance_floor > 0.0):
            raise ValueError(f"distance_floor must be positive, got {self.distance_floor}")


@dataclass(frozen=True)
class TruthResult:
    """Converged state of truth discovery for one sample.

    reliabilities are the final omega_s recomputed at the returned truth
    vector; uncertainties are exp(-omega_s). anchor_class is the frozen
    ensemble-mean argmax (the class the accuracy-preserving variant protects).
    clamped_distances counts degenerate source distances hit by the floor.
    """

    truth_vector: np.ndarray
    reliabilities: np.ndarray
    uncertainties: np.ndarray
    hv: float
    iterations_used: int
    objective_trace: np.ndarray
    anchor_class: int
    converged: bool
    clamped_distances: int = 0


def td_objective(truth: np.ndarray, sources: np.ndarray, omega: np.ndarray) -> float:
    """Reliability-weighted sum of squared distances from truth to sources."""
    sq = np.square(np.asarray(sources, dtype=np.float64) - np.asarray(truth, dtype=np.float64))
    return float(np.asarray(omega, dtype=np.float64) @ sq.sum(axis=1))


def _reliabilities(truth, sources, cfg: TruthConfig) -> tuple[np.ndarray, int]:
    sq = np.square(sources - truth).sum(axis=1)
    clamped = int((sq < cfg.distance_floor).sum())
    sq_floored = np.maximum(sq, cfg.distance_floor)
    if cfg.distance_power == 2:
        denom = sq_floored
    else:
        denom = np.maximum(np.sqrt(sq), cfg.distance_floor)
    return np.log(sq_floored.sum() / denom), clamped


def update_reliabilities(truth, sources, cfg: TruthConfig = TruthConfig()) -> np.ndarray:
    """Closed-form reliability update: omega_s = ln(sum_t d_t^2 / d_s^p).

    Squared distances below cfg.distance_floor are clamped to the floor before
    the ratio, so a source sitting exactly on the truth gets a large finite
    reliability instead of an infinity.
    """
    truth = np.asarray(truth, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    omega, _ = _reliabilities(truth, sources, cfg)
    return omega


def update_truth(sources, omega) -> np.ndarray:
    """Reliability-weighted mean of the sources (masses omega need not sum to 1)."""
    omega = np.asarray(omega, dtype=np.float64)
    sources = np.asarray(sources, dtype=np.float64)
    total = float(omega.sum())
    if total <= 0.0:
        raise DegenerateReliabilityError(
            f"reliabilities sum to {total}; weighted mean undefined"
        )
    return (omega @ sources) / total


def project_accuracy_preserving(z, c: int) -> np.ndarray:
    """Euclidean projection of z onto {x on simplex : x_c >= x_l for all l}.

    If c already attains the max (ties count, preferring c) the input is
    returned unchanged. Otherwise component c is pooled with the largest
    competing components: grow the pool through the competitors in descending
    order until the pool mean strictly exceeds the next competitor, then set
    every pooled component to that mean. Ties in the result are exact: the
    pooled components share one float value.
    """
    z = np.array(z, dtype=np.float64)
    if argmax_tiebreak(z, prefer=c) == c:
        return z
    num_classes = z.shape[0]
    others = np.delete(np.arange(num_classes), c)
    order = others[np.argsort(-z[others], kind="stable")]
    vals = z[order]
    running = float(z[c])
    pool_size = 0
    level = running
    for k in range(num_classes - 1):
        running += vals[k]
        level = running / (k + 2)
        pool_size = k + 1
        if k + 1 == num_classes - 1 or level > vals[k + 1]:
            break
    z[c] = level
    z[order[:pool_size]] = level
    return z


def entropy_geometric_variance(truth, sources) -> float:
    """Ambiguity of an ensemble around its truth vector.

    Total squared distance V = sum_s ||z* - z_s||^2 scaled by the entropy of
    the normalized squared-distance profile. Zero when all sources sit on the
    truth (V = 0) and maximal for a fixed V when the sources are equidistant.

    V below HV_VARIANCE_FLOOR is treated as zero: a weighted mean of
    coincident sources can land one ulp off them, and that noise (~1e-33)
    must not surface as a nonzero ambiguity.
    """
    sq = np.square(np.asarray(sources, dtype=np.float64) - np.asarray(truth, dtype=np.float64)).sum(axis=1)
    variance = float(sq.sum())
    if variance <= HV_VARIANCE_FLOOR:
        return 0.0
    q = sq / variance
    pos = q > 0.0
    entropy = float(-(q[pos] @ np.log(q[pos])))
    return entropy * variance


def _discover(sources: np.ndarray, cfg: TruthConfig) -> TruthResult:
    """Core loop; assumes sources is a validated (S, L) float64 array."""
    z = sources.mean(axis=0)
    anchor = argmax_tiebreak(z)
    num_sources = sources.shape[0]
    if num_sources == 1:
        # A single source pins the constraint to omega=0, leaving every truth
        # vector optimal; the source itself is the canonical fixed point.
        return TruthResult(
            truth_vector=sources[0].copy(),
            reliabilities=np.zeros(1),
            uncertainties=np.ones(1),
            hv=0.0,
            iterations_used=0,
            objective_trace=np.empty(0),
            anchor_class=anchor,
            converged=True,
        )
    preserve = cfg.variant == "accuracy_preserving"
    trace = []
    clamp_total = 0
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        omega, nclamp = _reliabilities(z, sources, cfg)
        clamp_total += nclamp
        new_z = update_truth(sources, omega)
        if preserve:
            new_z = project_accuracy_preserving(new_z, anchor)
        trace.append(td_objective(new_z, sources, omega))
        displacement = float(np.square(new_z - z).sum())
        z = new_z
        if displacement < cfg.epsilon:
            converged = True
            break
    omega, nclamp = _reliabilities(z, sources, cfg)
    clamp_total += nclamp
    return TruthResult(
        truth_vector=z,
        reliabilities=omega,
        uncertainties=np.exp(-omega),
        hv=entropy_geometric_variance(z, sources),
        iterations_used=iterations,
        objective_trace=np.asarray(trace),
        anchor_class=anchor,
        converged=converged,
        clamped_distances=clamp_total,
    )


def discover_truth(sources, cfg: TruthConfig = TruthConfig()) -> TruthResult:
    """Run truth discovery for one sample given its (S, L) source matrix."""
    arr, _ = _validate_rows(np.asarray(sources, dtype=np.float64), "sources")
    if arr.ndim != 2:
        raise ValueError(f"sources must be a (S, L) matrix, got shape {arr.shape}")
    return _discover(arr, cfg)


def discover_all(ensemble, cfg: TruthConfig = TruthConfig()) -> list[TruthResult]:
    """Truth discovery for every sample of an ensemble.

    Accepts an EnsembleTensor or a raw (S, N, L) array (which may have N=0).
    Per-sample failures are collected and re-raised together with their sample
    indices.
    """
    if isinstance(ensemble, EnsembleTensor):
        preds = ensemble.predictions
    else:
        preds = np.asarray(ensemble, dtype=np.float64)
        if preds.ndim != 3:
            raise ValueError(f"expected (S, N, L) predictions, got shape {preds.shape}")
        if preds.shape[1] > 0:
            preds, _ = _validate_rows(preds, "predictions")
    results: list[TruthResult] = []
    failures: list[tuple[int, Exception]] = []
    for i in range(preds.shape[1]):
        try:
            results.append(_discover(np.ascontiguousarray(preds[:, i, :]), cfg))
        except (DegenerateReliabilityError, FloatingPointError, ValueError) as exc:
            failures.append((i, exc))
    if failures:
        raise BatchDiscoveryError(failures)
    return results


def truth_matrix(results: list[TruthResult]) -> np.ndarray:
    """Stack per-sample truth vectors into an (N, L) array."""
    return np.stack([r.truth_vector for r in results]) if results else np.empty((0, 0))


def hv_values(results: list[TruthResult]) -> np.ndarray:
    """Per-sample ambiguity scores as an (N,) array."""
    return np.array([r.hv for r in results])


def anchor_classes(results: list[TruthResult]) -> np.ndarray:
    """Per-sample frozen ensemble-mean argmax classes."""
    return np.array([r.anchor_class for r in results], dtype=np.int64)
