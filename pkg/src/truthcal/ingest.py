"""Dataset manifests, CSV/JSON readers and writers, and the split protocol.

All numeric CSV files are headerless. Source files hold N rows of L
probabilities (or logits, per the manifest flag); labels hold one integer per
line. Floats are written with 9 significant digits, which round-trips below
the simplex validation tolerance. JSON artifacts carry a schema version and
readers reject mismatches.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import EnsembleTensor, SimplexValidationError, softmax
from .metrics import BinningScheme
from .posthoc import AttenuationWeights
from .truth import TruthResult

SCHEMA_VERSION = 1


class IngestError(ValueError):
    """Malformed manifest, unreadable data file, or schema mismatch."""


@dataclass(frozen=True)
class Manifest:
    """Parsed dataset manifest with paths resolved against its directory."""

    num_classes: int
    values: str
    labels_path: Path
    source_paths: tuple[Path, ...]
    hv_path: Path | None = None


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise IngestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise IngestError(f"{path}: manifest must be a JSON object")
    version = raw.get("version")
    if version != SCHEMA_VERSION:
        raise IngestError(f"{path}: unsupported manifest version {version!r}")
    num_classes = raw.get("num_classes")
    if not isinstance(num_classes, int) or num_classes < 2:
        raise IngestError(f"{path}: num_classes must be an integer >= 2, got {num_classes!r}")
    values = raw.get("values")
    if values not in ("probabilities", "logits"):
        raise IngestError(f"{path}: values must be 'probabilities' or 'logits', got {values!r}")
    labels = raw.get("labels")
    sources = raw.get("sources")
    if not isinstance(labels, str):
        raise IngestError(f"{path}: labels must be a path string")
    if not isinstance(sources, list) or not sources or not all(isinstance(s, str) for s in sources):
        raise IngestError(f"{path}: sources must be a non-empty list of path strings")
    base = path.parent
    manifest = Manifest(
        num_classes=num_classes,
        values=values,
        labels_path=base / labels,
        source_paths=tuple(base / s for s in sources),
        hv_path=(base / raw["hv"]) if isinstance(raw.get("hv"), str) else None,
    )
    for p in (manifest.labels_path, *manifest.source_paths):
        if not p.exists():
            raise IngestError(f"{path}: referenced file {p} does not exist")
    if manifest.hv_path is not None and not manifest.hv_path.exists():
        raise IngestError(f"{path}: referenced file {manifest.hv_path} does not exist")
    return manifest


def _read_matrix(path: Path, num_columns: int) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            fields = text.split(",")
            if len(fields) != num_columns:
                raise IngestError(
                    f"{path}: line {lineno}: expected {num_columns} columns, got {len(fields)}"
                )
            try:
                rows.append([float(f) for f in fields])
            except ValueError as exc:
                raise IngestError(f"{path}: line {lineno}: malformed number: {exc}") from exc
    if not rows:
        raise IngestError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def _read_labels(path: Path, num_classes: int) -> np.ndarray:
    labels = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                value = int(text)
            except ValueError as exc:
                raise IngestError(f"{path}: line {lineno}: malformed label: {exc}") from exc
            if not (0 <= value < num_classes):
                raise IngestError(
                    f"{path}: line {lineno}: label {value} outside [0, {num_classes})"
                )
            labels.append(value)
    if not labels:
        raise IngestError(f"{path}: no labels")
    return np.asarray(labels, dtype=np.int64)


def load(manifest) -> EnsembleTensor:
    """Assemble a validated EnsembleTensor from a manifest (path or parsed)."""
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    matrices = []
    for p in manifest.source_paths:
        mat = _read_matrix(p, manifest.num_classes)
        if manifest.values == "logits":
            mat = softmax(mat, axis=1)
        matrices.append(mat)
    first = manifest.source_paths[0]
    for p, mat in zip(manifest.source_paths, matrices):
        if mat.shape[0] != matrices[0].shape[0]:
            raise IngestError(
                f"row-count mismatch: {first} has {matrices[0].shape[0]} rows "
                f"but {p} has {mat.shape[0]}"
            )
    labels = _read_labels(manifest.labels_path, manifest.num_classes)
    if labels.shape[0] != matrices[0].shape[0]:
        raise IngestError(
            f"row-count mismatch: {first} has {matrices[0].shape[0]} rows "
            f"but {manifest.labels_path} has {labels.shape[0]} labels"
        )
    try:
        ens = EnsembleTensor(
            np.stack(matrices),
            labels,
            tuple(p.stem for p in manifest.source_paths),
        )
    except SimplexValidationError as exc:
        raise IngestError(f"while validating {first.parent}: {exc}") from exc
    if ens.renormalized_rows:
        warnings.warn(f"renormalized {ens.renormalized_rows} off-simplex row(s)")
    return ens


def load_hv(manifest: Manifest) -> np.ndarray | None:
    """Precomputed per-sample ambiguity column, if the manifest names one."""
    if manifest.hv_path is None:
        return None
    return _read_matrix(manifest.hv_path, 1)[:, 0]


@dataclass(frozen=True)
class SplitSpec:
    """Seeded random partition into calibration and evaluation halves."""

    seed: int = 0
    fraction: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.fraction < 1.0):
            raise ValueError(f"fraction must be in (0, 1), got {self.fraction}")


def split(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Shuffle 0..n-1 and cut at floor(fraction*n): (calibration, evaluation)."""
    if n < 2:
        raise IngestError(f"cannot split {n} sample(s) into two non-empty sides")
    order = np.random.default_rng(spec.seed).permutation(n)
    cut = int(spec.fraction * n)
    if cut == 0 or cut == n:
        raise IngestError(
            f"fraction {spec.fraction} leaves an empty side for {n} samples"
        )
    return order[:cut], order[cut:]


def _write_text(path, text: str) -> Path:
    path = Path(path)
    if not path.parent.exists():
        raise IngestError(f"directory {path.parent} does not exist")
    path.write_text(text)
    return path


def format_matrix_csv(matrix: np.ndarray) -> str:
    """Headerless CSV with 9 significant digits per value."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    return "\n".join(",".join(f"{v:.9g}" for v in row) for row in matrix) + "\n"


def save_matrix_csv(matrix: np.ndarray, path) -> Path:
    return _write_text(path, format_matrix_csv(matrix))


def load_matrix_csv(path, num_columns: int | None = None) -> np.ndarray:
    mat = _read_matrix(Path(path), num_columns) if num_columns else None
    if mat is None:
        with open(path) as fh:
            first = fh.readline()
        mat = _read_matrix(Path(path), len(first.strip().split(",")))
    return mat


def save_report(report: dict, path) -> Path:
    """Write a metric report as versioned, key-sorted JSON."""
    payload = {"version": SCHEMA_VERSION, **report}
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_report(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise IngestError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON: {exc}") from exc
    if raw.get("version") != SCHEMA_VERSION:
        raise IngestError(f"{path}: unsupported report version {raw.get('version')!r}")
    return raw


def save_weights(weights: AttenuationWeights, path) -> Path:
    payload = {
        "version": SCHEMA_VERSION,
        "bins": [float(e) for e in weights.bins.endpoints],
        "psi": [float(x) for x in weights.psi],
        "alpha1": float(weights.alpha1),
        "alpha2_mode": weights.alpha2_mode,
        "alpha2_value": float(weights.alpha2_value),
        "loss_trace": list(weights.loss_trace),
    }
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_weights(path) -> AttenuationWeights:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise IngestError(f"cannot read weights {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON: {exc}") from exc
    if raw.get("version") != SCHEMA_VERSION:
        raise IngestError(f"{path}: unsupported weights version {raw.get('version')!r}")
    try:
        return AttenuationWeights(
            bins=BinningScheme(np.asarray(raw["bins"], dtype=np.float64)),
            psi=np.asarray(raw["psi"], dtype=np.float64),
            alpha1=float(raw["alpha1"]),
            alpha2_mode=str(raw["alpha2_mode"]),
            alpha2_value=float(raw.get("alpha2_value", 0.0)),
            loss_trace=tuple(raw.get("loss_trace", ())),
        )
    except (KeyError, ValueError) as exc:
        raise IngestError(f"{path}: invalid weights payload: {exc}") from exc


def save_truth_results(
    results: list[TruthResult], out_dir, source_ids: tuple[str, ...] | None = None
) -> dict[str, Path]:
    """Write truth vectors, ambiguity column, and a reliability summary.

    Produces truth_vectors.csv (N x L), hv.csv (N x 1), and
    reliability_summary.json with per-source reliability statistics.
    """
    out_dir = Path(out_dir)
    if not out_dir.exists():
        raise IngestError(f"directory {out_dir} does not exist")
    truth = np.stack([r.truth_vector for r in results])
    hv = np.array([[r.hv] for r in results])
    omegas = np.stack([r.reliabilities for r in results])
    upsilons = np.stack([r.uncertainties for r in results])
    num_sources = omegas.shape[1]
    ids = source_ids if source_ids else tuple(f"s{k:02d}" for k in range(num_sources))
    summary = {
        "version": SCHEMA_VERSION,
        "num_samples": len(results),
        "iterations_mean": float(np.mean([r.iterations_used for r in results])),
        "converged": int(sum(r.converged for r in results)),
        "sources": {
            ids[k]: {
                "reliability_mean": float(omegas[:, k].mean()),
                "reliability_std": float(omegas[:, k].std()),
                "uncertainty_mean": float(upsilons[:, k].mean()),
            }
            for k in range(num_sources)
        },
    }
    paths = {
        "truth_vectors": save_matrix_csv(truth, out_dir / "truth_vectors.csv"),
        "hv": save_matrix_csv(hv, out_dir / "hv.csv"),
        "reliability_summary": _write_text(
            out_dir / "reliability_summary.json",
            json.dumps(summary, indent=2, sort_keys=True) + "\n",
        ),
    }
    return paths


def save_manifest(
    path, num_classes: int, values: str, labels: str, sources: list[str]
) -> Path:
    """Write a manifest referencing files relative to the manifest location."""
    payload = {
        "version": SCHEMA_VERSION,
        "num_classes": num_classes,
        "values": values,
        "labels": labels,
        "sources": sources,
    }
    return _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
