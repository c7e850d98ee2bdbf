"""Confidence-ranking calibration toolkit for small multimodal classifiers."""

from .calibration import (
    MaskChain,
    RankingRecord,
    compute_vrr,
    confidence_increment,
    difference_pair_loss,
    enumerate_chain_pairs,
    evaluate_vrr,
    hinge_pair_loss,
    sample_chain,
    sample_objective,
)
from .data import (
    CorruptionSpec,
    Dataset,
    SyntheticSpec,
    corrupt_gaussian,
    generate_synthetic,
    load_csv_dataset,
    split,
    write_csv_dataset,
)
from .metrics import MetricsReport, ScoredPrediction, accuracy, aurc, build_report, e_aurc, mean_nll
from .model import (
    ClassifierParams,
    ModelSpec,
    Prediction,
    SubsetMask,
    confidence_of,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import (
    TrainConfig,
    evaluate,
    lambda_sweep,
    noise_sweep,
    replicate,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ClassifierParams",
    "CorruptionSpec",
    "Dataset",
    "MaskChain",
    "MetricsReport",
    "ModelSpec",
    "Prediction",
    "RankingRecord",
    "ScoredPrediction",
    "SubsetMask",
    "SyntheticSpec",
    "TrainConfig",
    "accuracy",
    "aurc",
    "build_report",
    "compute_vrr",
    "confidence_increment",
    "confidence_of",
    "corrupt_gaussian",
    "difference_pair_loss",
    "e_aurc",
    "enumerate_chain_pairs",
    "evaluate",
    "evaluate_vrr",
    "forward",
    "generate_synthetic",
    "hinge_pair_loss",
    "init_params",
    "lambda_sweep",
    "load_checkpoint",
    "load_csv_dataset",
    "mean_nll",
    "noise_sweep",
    "replicate",
    "sample_chain",
    "sample_objective",
    "save_checkpoint",
    "split",
    "train",
    "write_csv_dataset",
]
