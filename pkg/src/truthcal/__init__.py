"""Truth discovery over ensemble predictions and calibration-error-driven
post-hoc confidence mapping."""

from .datamodel import (
    EnsembleTensor,
    PredictionOutcome,
    SimplexValidationError,
    argmax_tiebreak,
    as_prob_vector,
    ensemble_mean,
    outcome,
    softmax,
)
from .ingest import IngestError, Manifest, SplitSpec, load, split
from .metrics import (
    BinningScheme,
    KdeConfig,
    ScoredSamples,
    accuracy,
    brier,
    build_bins,
    ece,
    ece_kde,
    ks_error,
    nll,
    reliability_diagram,
)
from .posthoc import (
    AttenuationWeights,
    TrainConfig,
    TrainingDivergedError,
    apply_mapping,
    evaluate_pipeline,
    fit,
    fit_compositional,
    fit_temperature,
    loss_and_gradient,
    predicted_scores,
)
from .synth import SynthSpec, generate
from .truth import (
    TruthConfig,
    TruthResult,
    discover_all,
    discover_truth,
    entropy_geometric_variance,
    project_accuracy_preserving,
    td_objective,
    update_reliabilities,
    update_truth,
)

__version__ = "0.1.0"

__all__ = [
    "AttenuationWeights",
    "BinningScheme",
    "EnsembleTensor",
    "IngestError",
    "KdeConfig",
    "Manifest",
    "PredictionOutcome",
    "ScoredSamples",
    "SimplexValidationError",
    "SplitSpec",
    "SynthSpec",
    "TrainConfig",
    "TrainingDivergedError",
    "TruthConfig",
    "TruthResult",
    "accuracy",
    "apply_mapping",
    "argmax_tiebreak",
    "as_prob_vector",
    "brier",
    "build_bins",
    "discover_all",
    "discover_truth",
    "ece",
    "ece_kde",
    "ensemble_mean",
    "entropy_geometric_variance",
    "evaluate_pipeline",
    "fit",
    "fit_compositional",
    "fit_temperature",
    "generate",
    "ks_error",
    "load",
    "loss_and_gradient",
    "nll",
    "outcome",
    "predicted_scores",
    "project_accuracy_preserving",
    "reliability_diagram",
    "softmax",
    "split",
    "td_objective",
    "update_reliabilities",
    "update_truth",
]
