"""Synthetic ensembles and brute-force oracles.

The generator draws per-sample class distributions from a symmetric
Dirichlet, samples labels from them, and lets each source report a
temperature-distorted, noise-perturbed view of the true distribution
(temperature < 1 sharpens, producing the overconfident regime).

The oracles re-derive results by deliberately different routes so the main
implementations never share code with their checkers: the projection oracle
runs Dykstra-corrected cyclic projections, and the ECE oracle is a naive
double loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import EnsembleTensor, softmax
from .metrics import BinningScheme


@dataclass(frozen=True)
class SynthSpec:
    """Shape and distortion parameters for one synthetic ensemble."""

    num_samples: int = 1000
    num_classes: int = 10
    num_sources: int = 5
    dirichlet_concentration: float = 0.3
    distortion_temperature: float | tuple[float, ...] = 0.5
    source_noise_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.num_samples < 1 or self.num_sources < 1 or self.num_classes < 2:
            raise ValueError(
                f"need N >= 1, S >= 1, L >= 2, got "
                f"({self.num_samples}, {self.num_sources}, {self.num_classes})"
            )
        if not (self.dirichlet_concentration > 0.0):
            raise ValueError("dirichlet_concentration must be positive")
        taus = np.atleast_1d(np.asarray(self.distortion_temperature, dtype=np.float64))
        if not (taus > 0.0).all():
            raise ValueError("distortion_temperature must be positive")
        if taus.size not in (1, self.num_sources):
            raise ValueError(
                f"{taus.size} temperatures for {self.num_sources} sources"
            )
        if self.source_noise_scale < 0.0:
            raise ValueError("source_noise_scale must be >= 0")

    def temperatures(self) -> np.ndarray:
        taus = np.atleast_1d(np.asarray(self.distortion_temperature, dtype=np.float64))
        if taus.size == 1:
            taus = np.full(self.num_sources, float(taus[0]))
        return taus


def generate(spec: SynthSpec) -> EnsembleTensor:
    """Draw a synthetic labeled ensemble, deterministic under spec.seed."""
    rng = np.random.default_rng(spec.seed)
    n, l, s = spec.num_samples, spec.num_classes, spec.num_sources
    p = rng.dirichlet(np.full(l, spec.dirichlet_concentration), size=n)
    # inverse-CDF label draw per row
    u = rng.random(n)
    labels = np.minimum((u[:, None] > p.cumsum(axis=1)).sum(axis=1), l - 1)
    log_p = np.log(np.maximum(p, 1e-30))
    taus = spec.temperatures()
    preds = np.empty((s, n, l))
    for k in range(s):
        logits = log_p / taus[k]
        if spec.source_noise_scale > 0.0:
            logits = logits + rng.standard_normal((n, l)) * spec.source_noise_scale
        preds[k] = softmax(logits, axis=1)
    return EnsembleTensor(preds, labels)


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    ranks = np.arange(1, v.size + 1)
    rho = np.nonzero(u + (1.0 - css) / ranks > 0.0)[0][-1]
    theta = (1.0 - css[rho]) / (rho + 1.0)
    return np.maximum(v + theta, 0.0)


def oracle_projection(z, c: int, tol: float = 1e-10, max_cycles: int = 200000) -> np.ndarray:
    """Ground-truth projection onto {x on simplex : x_c >= x_l}.

    Cyclic projections with Dykstra correction terms over the simplex and the
    L-1 halfspaces {x_l <= x_c}, run until the per-cycle displacement falls
    below tol. The plain alternating scheme would only find a feasible point;
    the correction terms make the limit the Euclidean projection.
    """
    z = np.asarray(z, dtype=np.float64)
    num_classes = z.size
    others = [l for l in range(num_classes) if l != c]
    x = z.copy()
    increments = [np.zeros(num_classes) for _ in range(1 + len(others))]
    for _ in range(max_cycles):
        previous = x.copy()
        y = x + increments[0]
        x = _project_simplex(y)
        increments[0] = y - x
        for m, l in enumerate(others, start=1):
            y = x + increments[m]
            x = y.copy()
            gap = x[l] - x[c]
            if gap > 0.0:
                x[l] -= gap / 2.0
                x[c] += gap / 2.0
            increments[m] = y - x
        if np.sqrt(np.square(x - previous).sum()) < tol:
            return x
    raise RuntimeError(f"projection oracle did not converge within {max_cycles} cycles")


def oracle_ece(confidence, correct, bins: BinningScheme) -> float:
    """Expected calibration error by explicit double loop over bins and samples.

    Kept structurally distinct from metrics.ece on purpose (differential
    testing): same bin semantics (half-open, last bin right-closed,
    out-of-range clamped to end bins), naive arithmetic.
    """
    endpoints = [float(e) for e in bins.endpoints]
    nbins = len(endpoints) - 1
    n = len(confidence)
    total = 0.0
    for b in range(nbins):
        members = 0
        hits = 0
        conf_sum = 0.0
        for w, ok in zip(confidence, correct):
            k = nbins - 1
            for cand in range(nbins):
                if w < endpoints[cand + 1]:
                    k = cand
                    break
            if k == b:
                members += 1
                conf_sum += float(w)
                if ok:
                    hits += 1
        if members:
            total += (members / n) * abs(hits / members - conf_sum / members)
    return total
