"""Command-line surface: synth -> discover -> calibrate -> evaluate.

Every subcommand is deterministic given its flags (all randomness flows from
explicit seeds, and seeds are echoed into the reports). Exit codes: 0 on
success, 2 for usage or ingestion problems, 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datamodel import SimplexValidationError, argmax_tiebreak_rows
from .ingest import (
    IngestError,
    SplitSpec,
    load,
    load_hv,
    load_manifest,
    load_weights,
    save_manifest,
    save_matrix_csv,
    save_report,
    save_truth_results,
    save_weights,
    split,
)
from .metrics import (
    BinRow,
    KdeConfig,
    ScoredSamples,
    build_bins,
    ece,
    ece_kde,
    reliability_csv,
    reliability_diagram,
)
from .posthoc import (
    TrainConfig,
    TrainingDivergedError,
    apply_mapping,
    evaluate_pipeline,
    fit,
    fit_compositional,
    identity_weights,
    predicted_scores,
)
from .synth import SynthSpec, generate
from .truth import (
    BatchDiscoveryError,
    DegenerateReliabilityError,
    TruthConfig,
    anchor_classes,
    discover_all,
    hv_values,
    truth_matrix,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

DEFAULT_EPSILON = math.exp(-8.0)


def _parse_tau(text: str):
    parts = [float(p) for p in text.split(",")]
    return parts[0] if len(parts) == 1 else tuple(parts)


def _parse_bandwidth(text: str):
    return text if text == "auto" else float(text)


def _add_kde_flags(sub):
    sub.add_argument("--kde-kernel", choices=["triweight", "gaussian"], default="triweight")
    sub.add_argument("--kde-bandwidth", type=_parse_bandwidth, default="auto",
                     help="kernel bandwidth, or 'auto' for the Silverman rule")
    sub.add_argument("--kde-grid", type=int, default=512, help="quadrature grid points")


def _add_truth_flags(sub):
    sub.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON,
                     help="squared-displacement convergence threshold (default e^-8)")
    sub.add_argument("--max-iters", type=int, default=50)
    sub.add_argument("--distance-power", type=int, choices=[1, 2], default=2)


def _add_mapping_flags(sub):
    sub.add_argument("--alpha1", type=float, default=1.0)
    sub.add_argument("--alpha2-mode", choices=["zero", "constant", "per-bin-psi"],
                     default="per-bin-psi")
    sub.add_argument("--alpha2-value", type=float, default=0.0,
                     help="multiplier used when --alpha2-mode constant")
    sub.add_argument("--regularize", choices=["none", "truth"], default="truth",
                     help="source of the per-sample ambiguity term")
    sub.add_argument("--hv-variant", choices=["vanilla", "atde"], default="vanilla",
                     help="truth-discovery variant used for the ambiguity term")
    sub.add_argument("--scores-from", choices=["de", "truth"], default="de",
                     help="confidence source: ensemble mean or truth vectors")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="truthcal",
        description="Truth discovery and calibration-error-driven confidence mapping",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("discover", help="run truth discovery and report consensus metrics")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--variant", choices=["vanilla", "atde"], default="atde")
    _add_truth_flags(p)
    p.add_argument("--bins", type=int, default=15)
    _add_kde_flags(p)
    p.add_argument("--report", choices=["json", "tsv"], default="json")
    p.set_defaults(func=cmd_discover)

    p = subs.add_parser("calibrate", help="fit attenuation weights on a calibration split")
    p.add_argument("manifest")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--epochs-hist", type=int, default=70)
    p.add_argument("--epochs-kde", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--loss", choices=["compositional", "hist", "kde"], default="compositional")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--replications", type=int, default=5)
    _add_mapping_flags(p)
    _add_truth_flags(p)
    _add_kde_flags(p)
    p.add_argument("--report", choices=["json", "tsv"], default="json")
    p.set_defaults(func=cmd_calibrate)

    p = subs.add_parser("evaluate", help="score predictions with or without a fitted mapping")
    p.add_argument("manifest")
    p.add_argument("--weights", default=None, help="weights JSON from calibrate")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--bins", type=int, default=15,
                   help="bin count when no weights file supplies frozen bins")
    p.add_argument("--split-seed", type=int, default=None,
                   help="evaluate only the evaluation side of this seeded split")
    p.add_argument("--split-fraction", type=float, default=0.5)
    p.add_argument("--svg", default=None, help="also render the reliability diagram to SVG")
    _add_mapping_flags(p)
    _add_truth_flags(p)
    _add_kde_flags(p)
    p.add_argument("--report", choices=["json", "tsv"], default="json")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("synth", help="generate a synthetic ensemble dataset")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--sources", type=int, default=5)
    p.add_argument("--concentration", type=float, default=0.3)
    p.add_argument("--tau", type=_parse_tau, default=0.5,
                   help="distortion temperature, shared or comma-separated per source")
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def _flatten(node, prefix: str, out: list[tuple[str, str]]):
    if isinstance(node, dict):
        for key in sorted(node):
            _flatten(node[key], f"{prefix}{key}." if prefix else f"{key}.", out)
        return
    if isinstance(node, (list, tuple)):
        for i, item in enumerate(node):
            _flatten(item, f"{prefix}{i}.", out)
        return
    out.append((prefix[:-1], "" if node is None else str(node)))


def _emit(report: dict, fmt: str):
    if fmt == "json":
        print(json.dumps(report, indent=2, sort_keys=True))
    else:
        pairs: list[tuple[str, str]] = []
        _flatten(report, "", pairs)
        for key, value in pairs:
            print(f"{key}\t{value}")


def _kde_config(args, num_classes: int) -> KdeConfig:
    return KdeConfig(
        kernel=args.kde_kernel,
        bandwidth=args.kde_bandwidth,
        grid_points=args.kde_grid,
        integration_range=(1.0 / num_classes, 1.0),
    )


def _truth_config(args, variant: str) -> TruthConfig:
    return TruthConfig(
        epsilon=args.epsilon,
        max_iters=args.max_iters,
        variant=variant,
        distance_power=args.distance_power,
    )


def _scores_from_truth(results, labels) -> tuple[ScoredSamples, np.ndarray]:
    probs = truth_matrix(results)
    preferred = anchor_classes(results)
    preds = argmax_tiebreak_rows(probs, prefer=preferred)
    conf = probs[np.arange(probs.shape[0]), preds]
    return ScoredSamples(conf, preds == labels), probs


def _prepare_scores(manifest, ens, args) -> tuple[ScoredSamples, np.ndarray, np.ndarray | None]:
    """Scores, backing probability matrix, and the ambiguity column (or None)."""
    need_hv = args.regularize == "truth"
    need_truth = args.scores_from == "truth"
    file_hv = load_hv(manifest) if need_hv else None
    if file_hv is not None and file_hv.shape[0] != ens.num_samples:
        raise IngestError(
            f"hv column has {file_hv.shape[0]} rows for {ens.num_samples} samples"
        )
    results = None
    if need_truth or (need_hv and file_hv is None):
        variant = "accuracy_preserving" if args.hv_variant == "atde" else "vanilla"
        results = discover_all(ens, _truth_config(args, variant))
    if need_truth:
        scores, probs = _scores_from_truth(results, ens.labels)
    else:
        probs = ens.mean_predictions
        scores = predicted_scores(probs, ens.labels)
    hv = None
    if need_hv:
        hv = file_hv if file_hv is not None else hv_values(results)
    return scores, probs, hv


def cmd_discover(args) -> int:
    ens = load(args.manifest)
    variant = "accuracy_preserving" if args.variant == "atde" else "vanilla"
    results = discover_all(ens, _truth_config(args, variant))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_truth_results(results, out_dir, ens.source_ids)
    kde_cfg = _kde_config(args, ens.num_classes)
    de_scores = predicted_scores(ens.mean_predictions, ens.labels)
    td_scores, _ = _scores_from_truth(results, ens.labels)
    table = {}
    for name, scores in (("de", de_scores), (args.variant, td_scores)):
        bins = build_bins(scores.confidence, args.bins)
        table[name] = {
            "ece_kde": ece_kde(scores, kde_cfg, num_classes=ens.num_classes),
            "ece": ece(scores, bins),
            "acc": float(scores.correct.mean()),
        }
    report = {
        "table": table,
        "config": {
            "variant": args.variant,
            "epsilon": args.epsilon,
            "max_iters": args.max_iters,
            "distance_power": args.distance_power,
            "bins": args.bins,
        },
    }
    _emit(report, args.report)
    return EXIT_OK


def _train_configs(args, seed: int, kde_cfg: KdeConfig) -> tuple[TrainConfig, TrainConfig]:
    base = TrainConfig(
        epochs=args.epochs_hist,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        loss="hist_ece",
        seed=seed,
        num_bins=args.bins,
        alpha1=args.alpha1,
        alpha2_mode=args.alpha2_mode.replace("-", "_"),
        alpha2_value=args.alpha2_value,
        kde=kde_cfg,
    )
    return base, replace(base, epochs=args.epochs_kde, loss="kde_ece")


def cmd_calibrate(args) -> int:
    manifest = load_manifest(args.manifest)
    ens = load(manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kde_cfg = _kde_config(args, ens.num_classes)
    scores_all, probs_all, hv_all = _prepare_scores(manifest, ens, args)
    n = ens.num_samples
    replications = []
    weights_first = None
    for r in range(args.replications):
        seed = args.seed + r
        cal_idx, eval_idx = split(n, SplitSpec(seed=seed, fraction=args.split_fraction))
        if cal_idx.size < args.bins:
            raise IngestError(
                f"calibration split has {cal_idx.size} samples for {args.bins} bins; "
                f"reduce --bins or provide more data"
            )
        cal_scores = scores_all.subset(cal_idx)
        cal_hv = hv_all[cal_idx] if hv_all is not None else None
        hist_cfg, kde_train = _train_configs(args, seed, kde_cfg)
        if args.loss == "compositional":
            weights = fit_compositional(cal_scores, hist_cfg, kde_train, hv=cal_hv)
        elif args.loss == "hist":
            weights = fit(cal_scores, hist_cfg, hv=cal_hv)
        else:
            weights = fit(cal_scores, replace(kde_train, epochs=args.epochs_kde), hv=cal_hv)
        eval_hv = hv_all[eval_idx] if hv_all is not None else None
        metrics = evaluate_pipeline(
            weights,
            scores_all.subset(eval_idx),
            hv=eval_hv,
            probs=probs_all[eval_idx],
            labels=ens.labels[eval_idx],
            kde=kde_cfg,
            num_classes=ens.num_classes,
        )
        replications.append({"split_seed": seed, "metrics": metrics})
        if r == 0:
            weights_first = weights
    aggregate, spread = _aggregate_metrics([rep["metrics"] for rep in replications])
    report = {
        **aggregate,
        "spread": spread,
        "replications": replications,
        "config": {
            "seed": args.seed,
            "replications": args.replications,
            "split_fraction": args.split_fraction,
            "bins": args.bins,
            "epochs_hist": args.epochs_hist,
            "epochs_kde": args.epochs_kde,
            "batch_size": args.batch_size,
            "learning_rate": args.learning_rate,
            "loss": args.loss,
            "alpha1": args.alpha1,
            "alpha2_mode": args.alpha2_mode,
            "regularize": args.regularize,
            "scores_from": args.scores_from,
        },
    }
    save_weights(weights_first, out_dir / "weights.json")
    save_report(report, out_dir / "report.json")
    _emit(report, args.report)
    return EXIT_OK


def _aggregate_metrics(all_metrics: list[dict]) -> tuple[dict, dict]:
    aggregate: dict = {}
    spread: dict = {}
    for key in ("acc", "ece", "ece_kde", "ks", "nll", "brier"):
        aggregate[key] = {}
        spread[key] = {}
        for phase, first in all_metrics[0][key].items():
            if first is None:
                aggregate[key][phase] = None
                continue
            values = [m[key][phase] for m in all_metrics]
            aggregate[key][phase] = float(np.mean(values))
            spread[key][phase] = float(np.std(values))
    return aggregate, spread


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest)
    ens = load(manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kde_cfg = _kde_config(args, ens.num_classes)
    scores_all, probs_all, hv_all = _prepare_scores(manifest, ens, args)
    labels = ens.labels
    if args.split_seed is not None:
        _, eval_idx = split(
            ens.num_samples, SplitSpec(seed=args.split_seed, fraction=args.split_fraction)
        )
        scores_all = scores_all.subset(eval_idx)
        probs_all = probs_all[eval_idx]
        labels = labels[eval_idx]
        hv_all = hv_all[eval_idx] if hv_all is not None else None
    if args.weights:
        weights = load_weights(args.weights)
    else:
        weights = identity_weights(
            build_bins(scores_all.confidence, args.bins),
            alpha1=args.alpha1,
            alpha2_mode=args.alpha2_mode.replace("-", "_"),
        )
    metrics = evaluate_pipeline(
        weights,
        scores_all,
        hv=hv_all,
        probs=probs_all,
        labels=labels,
        kde=kde_cfg,
        num_classes=ens.num_classes,
    )
    report = {
        **metrics,
        "config": {
            "weights": args.weights,
            "split_seed": args.split_seed,
            "split_fraction": args.split_fraction,
            "regularize": args.regularize,
            "scores_from": args.scores_from,
        },
    }
    save_report(report, out_dir / "report.json")
    mapped = ScoredSamples(
        apply_mapping(scores_all.confidence, hv_all, weights), scores_all.correct
    )
    rows = reliability_diagram(mapped, weights.bins)
    (out_dir / "reliability.csv").write_text(reliability_csv(rows))
    if args.svg:
        Path(args.svg).write_text(render_reliability_svg(rows))
    _emit(report, args.report)
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_samples=args.samples,
        num_classes=args.classes,
        num_sources=args.sources,
        dirichlet_concentration=args.concentration,
        distortion_temperature=args.tau,
        source_noise_scale=args.noise,
        seed=args.seed,
    )
    ens = generate(spec)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source_names = []
    for k in range(ens.num_sources):
        name = f"source_{k:02d}.csv"
        save_matrix_csv(ens.predictions[k], out_dir / name)
        source_names.append(name)
    labels_text = "\n".join(str(int(y)) for y in ens.labels) + "\n"
    (out_dir / "labels.csv").write_text(labels_text)
    manifest_path = save_manifest(
        out_dir / "manifest.json",
        num_classes=ens.num_classes,
        values="probabilities",
        labels="labels.csv",
        sources=source_names,
    )
    print(str(manifest_path))
    return EXIT_OK


def render_reliability_svg(rows: list[BinRow], size: int = 420, margin: int = 45) -> str:
    """Reliability bars with the diagonal reference, as standalone SVG."""
    inner = size - 2 * margin
    x0, y0 = margin, size - margin

    def sx(v: float) -> float:
        return x0 + v * inner

    def sy(v: float) -> float:
        return y0 - v * inner

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="{x0}" y="{margin}" width="{inner}" height="{inner}" '
        f'fill="white" stroke="black" stroke-width="1"/>',
    ]
    for row in rows:
        if row.count == 0 or row.acc is None:
            continue
        left = sx(max(row.bin_low, 0.0))
        right = sx(min(row.bin_high, 1.0))
        top = sy(row.acc)
        parts.append(
            f'<rect x="{left:.2f}" y="{top:.2f}" width="{right - left:.2f}" '
            f'height="{y0 - top:.2f}" fill="steelblue" fill-opacity="0.7" '
            f'stroke="black" stroke-width="0.5"/>'
        )
    parts.append(
        f'<line x1="{sx(0.0):.2f}" y1="{sy(0.0):.2f}" x2="{sx(1.0):.2f}" y2="{sy(1.0):.2f}" '
        f'stroke="gray" stroke-dasharray="5,4" stroke-width="1"/>'
    )
    parts.append(
        f'<text x="{sx(0.5):.2f}" y="{size - 8}" text-anchor="middle" '
        f'font-size="13">confidence</text>'
    )
    parts.append(
        f'<text x="12" y="{sy(0.5):.2f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 12 {sy(0.5):.2f})">accuracy</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (
        TrainingDivergedError,
        DegenerateReliabilityError,
        BatchDiscoveryError,
        FloatingPointError,
        OverflowError,
    ) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestError, SimplexValidationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
