"""Evaluation metrics and report assembly.

AURC uses the discrete risk-coverage average: sort predictions by descending
confidence (ties broken by original index, never by correctness), let r(i) be
the error rate among the top i, and average r(i) over i = 1..n. E-AURC
subtracts the AURC of the optimal reordering of the same correctness multiset
(all correct first), so it is always >= 0.

Reports carry raw values plus the conventional reporting scales:
NLL x10, AURC and E-AURC x1000, VRR as a percentage.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyInputError, SpecError, StateError
from .model import ClassifierParams, SubsetMask, forward

NLL_SCALE = 10.0
AURC_SCALE = 1000.0
VRR_SCALE = 100.0


@dataclass(frozen=True)
class ScoredPrediction:
    confidence: float
    correct: bool
    nll_term: float


def accuracy(preds: Sequence[ScoredPrediction]) -> float:
    """Percentage of correct predictions."""
    if not preds:
        raise EmptyInputError("no predictions")
    return 100.0 * sum(1 for p in preds if p.correct) / len(preds)


def error_rate(preds: Sequence[ScoredPrediction]) -> float:
    return 100.0 - accuracy(preds)


def mean_nll(preds: Sequence[ScoredPrediction]) -> float:
    if not preds:
        raise EmptyInputError("no predictions")
    return float(np.mean([p.nll_term for p in preds]))


def _risk_coverage_average(correct_in_order: Sequence[bool]) -> float:
    errors = 0
    total = 0.0
    for i, ok in enumerate(correct_in_order, start=1):
        if not ok:
            errors += 1
        total += errors / i
    return total / len(correct_in_order)


def aurc(preds: Sequence[ScoredPrediction]) -> float:
    """Area under the discrete risk-coverage curve (lower is better)."""
    if not preds:
        raise EmptyInputError("no predictions")
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, i))
    return _risk_coverage_average([preds[i].correct for i in order])


def e_aurc(preds: Sequence[ScoredPrediction]) -> float:
    """AURC in excess of the best achievable ordering (all correct first)."""
    value = aurc(preds)
    num_correct = sum(1 for p in preds if p.correct)
    optimal = _risk_coverage_average([True] * num_correct + [False] * (len(preds) - num_correct))
    excess = value - optimal
    assert excess >= -1e-12, f"E-AURC below zero beyond float noise: {excess}"
    return max(excess, 0.0)


def mean_abs_conf_shift(
    params_a: ClassifierParams,
    params_b: ClassifierParams,
    dataset,
    masks: Sequence[SubsetMask],
) -> float:
    """Mean |conf_a - conf_b| over all samples and masks."""
    if params_a.spec_signature() != params_b.spec_signature():
        raise SpecError("models have different parameter shapes")
    if not masks:
        raise EmptyInputError("no masks")
    if dataset.num_samples == 0:
        raise EmptyInputError("empty dataset")
    total = 0.0
    for i in range(dataset.num_samples):
        features = dataset.features(i)
        for mask in masks:
            conf_a = forward(params_a, features, mask)[0].confidence
            conf_b = forward(params_b, features, mask)[0].confidence
            total += abs(conf_a - conf_b)
    return total / (dataset.num_samples * len(masks))


def confidence_by_subset_size(records) -> dict[int, float]:
    """Mean confidence per mask size over the distinct (sample, mask) pairs seen."""
    seen: dict[tuple[int, frozenset], float] = {}
    for r in records:
        seen[(r.sample_id, r.t_mask.present)] = r.conf_t
        seen[(r.sample_id, r.s_mask.present)] = r.conf_s
    by_size: dict[int, list[float]] = {}
    for (_, mask), conf in seen.items():
        by_size.setdefault(len(mask), []).append(conf)
    return {size: float(np.mean(confs)) for size, confs in sorted(by_size.items())}


@dataclass(frozen=True)
class MetricsReport:
    accuracy_pct: float
    nll_raw: float
    nll_scaled: float
    aurc_raw: float
    aurc_scaled: float
    e_aurc_raw: float
    e_aurc_scaled: float
    vrr_raw: float
    vrr_pct: float
    mean_confidence_full: float
    mean_confidence_by_subset_size: dict[int, float]

    def to_json_dict(self) -> dict:
        return {
            "accuracy_pct": self.accuracy_pct,
            "nll_raw": self.nll_raw,
            "nll_scaled": self.nll_scaled,
            "aurc_raw": self.aurc_raw,
            "aurc_scaled": self.aurc_scaled,
            "e_aurc_raw": self.e_aurc_raw,
            "e_aurc_scaled": self.e_aurc_scaled,
            "vrr_raw": self.vrr_raw,
            "vrr_pct": self.vrr_pct,
            "mean_confidence_full": self.mean_confidence_full,
            "mean_confidence_by_subset_size": {
                str(size): conf for size, conf in sorted(self.mean_confidence_by_subset_size.items())
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json_dict(cls, obj: dict) -> "MetricsReport":
        return cls(
            accuracy_pct=obj["accuracy_pct"],
            nll_raw=obj["nll_raw"],
            nll_scaled=obj["nll_scaled"],
            aurc_raw=obj["aurc_raw"],
            aurc_scaled=obj["aurc_scaled"],
            e_aurc_raw=obj["e_aurc_raw"],
            e_aurc_scaled=obj["e_aurc_scaled"],
            vrr_raw=obj["vrr_raw"],
            vrr_pct=obj["vrr_pct"],
            mean_confidence_full=obj["mean_confidence_full"],
            mean_confidence_by_subset_size={
                int(k): v for k, v in obj["mean_confidence_by_subset_size"].items()
            },
        )


CSV_SUMMARY_FIELDS = (
    "accuracy_pct",
    "nll_scaled",
    "aurc_scaled",
    "e_aurc_scaled",
    "vrr_pct",
    "mean_confidence_full",
)


def report_csv_header() -> str:
    return ",".join(CSV_SUMMARY_FIELDS)


def report_csv_row(report: MetricsReport) -> str:
    return ",".join(f"{getattr(report, name):.9g}" for name in CSV_SUMMARY_FIELDS)


def build_report(
    predictions: Sequence[ScoredPrediction] | None,
    vrr: float | None,
    mean_conf_by_size: dict[int, float] | None,
) -> MetricsReport:
    """Assemble a report, applying the reporting scales."""
    if predictions is None or vrr is None or mean_conf_by_size is None:
        raise StateError("missing report constituent")
    nll_value = mean_nll(predictions)
    aurc_value = aurc(predictions)
    e_aurc_value = e_aurc(predictions)
    return MetricsReport(
        accuracy_pct=accuracy(predictions),
        nll_raw=nll_value,
        nll_scaled=nll_value * NLL_SCALE,
        aurc_raw=aurc_value,
        aurc_scaled=aurc_value * AURC_SCALE,
        e_aurc_raw=e_aurc_value,
        e_aurc_scaled=e_aurc_value * AURC_SCALE,
        vrr_raw=vrr,
        vrr_pct=vrr * VRR_SCALE,
        mean_confidence_full=float(np.mean([p.confidence for p in predictions])),
        mean_confidence_by_subset_size=dict(mean_conf_by_size),
    )


def format_mean_std(mean: float, std: float) -> str:
    """Table cell format, e.g. 23.38+-1.39 rendered with the +- sign."""
    return f"{mean:.2f}±{std:.2f}"
