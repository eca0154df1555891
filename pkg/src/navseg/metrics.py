"""Evaluation suite: sIoU@k, msIoU, P@K, existence accuracy, confusion counts.

Per-sample scoring follows the existence-aware piecewise rule: a true-positive
sample scores min(k*IoU, 1), a true-negative scores 1, and any existence error
scores 0. msIoU averages those scores over k = 1..floor(1/K). No-target
samples use the empty-mask convention (empty vs empty IoU = 1, one-sided
empty IoU = 0) so every sample carries a well-defined IoU.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

from .geometry import Polygon, mask_iou, rasterize


class ExistenceLabel(str, Enum):
    NO_TARGET = "no_target"
    SINGLE_TARGET = "single_target"
    MULTI_TARGET = "multi_target"

    @property
    def positive(self) -> bool:
        return self is not ExistenceLabel.NO_TARGET


EXISTENCE_WIRE = {
    ExistenceLabel.NO_TARGET: "no",
    ExistenceLabel.SINGLE_TARGET: "single",
    ExistenceLabel.MULTI_TARGET: "multi",
}
WIRE_EXISTENCE = {v: k for k, v in EXISTENCE_WIRE.items()}


def existence_from_count(n_polygons: int) -> ExistenceLabel:
    if n_polygons == 0:
        return ExistenceLabel.NO_TARGET
    if n_polygons == 1:
        return ExistenceLabel.SINGLE_TARGET
    return ExistenceLabel.MULTI_TARGET


class UndefinedMetricError(ValueError):
    """A metric was requested over an empty sample list."""


class InputMismatchError(ValueError):
    """Ground-truth ids and prediction ids do not line up."""

    def __init__(self, message: str, offending_ids: Sequence[str] = ()):
        super().__init__(message)
        self.offending_ids = list(offending_ids)


@dataclass
class SampleEval:
    """Per-sample existence outcome plus the sample-level IoU."""

    sample_id: str
    gt_positive: bool
    pred_positive: bool
    outcome: str
    iou: float

    def __post_init__(self) -> None:
        expected = _OUTCOMES[(self.gt_positive, self.pred_positive)]
        if self.outcome != expected:
            raise ValueError(f"outcome {self.outcome} inconsistent with flags, expected {expected}")
        if self.outcome == "TN" and self.iou != 1.0:
            raise ValueError("TN samples must carry iou = 1.0")
        if self.outcome in ("FP", "FN") and self.iou != 0.0:
            raise ValueError(f"{self.outcome} samples must carry iou = 0.0")
        if not 0.0 <= self.iou <= 1.0:
            raise ValueError(f"iou out of range: {self.iou}")


_OUTCOMES = {
    (True, True): "TP",
    (False, False): "TN",
    (False, True): "FP",
    (True, False): "FN",
}


@dataclass
class EvalConfig:
    raster_width: int = 640
    raster_height: int = 640
    msiou_k: float = 0.1
    p_at_k: tuple[float, ...] = (0.1, 0.2)

    def echo(self) -> dict:
        return {
            "eval.raster_width": self.raster_width,
            "eval.raster_height": self.raster_height,
            "eval.msiou_k": self.msiou_k,
            "eval.p_at_k": list(self.p_at_k),
        }


@dataclass
class MetricReport:
    msiou: float
    msiou_k: float
    p_at_k: dict[float, float]
    accuracy: float
    confusion: dict[str, int]
    per_sample: list[SampleEval]
    n: int
    config_echo: dict = field(default_factory=dict)

    def to_dict(self, include_per_sample: bool = True) -> dict:
        doc = {
            "msiou": self.msiou,
            "msiou_k": self.msiou_k,
            "p_at_k": {f"{k:g}": v for k, v in self.p_at_k.items()},
            "accuracy": self.accuracy,
            "confusion": self.confusion,
            "n": self.n,
            "conventions": {
                "empty_empty_iou": 1.0,
                "one_sided_empty_iou": 0.0,
                "p_at_k_comparison": "strictly_greater",
                "no_target_samples_scored": True,
            },
            "config": self.config_echo,
        }
        if include_per_sample:
            doc["per_sample"] = [
                {
                    "id": s.sample_id,
                    "outcome": s.outcome,
                    "iou": s.iou,
                }
                for s in self.per_sample
            ]
        return doc


def existence_outcome(gt: ExistenceLabel, pred: ExistenceLabel) -> str:
    """Binary existence confusion cell; single vs multi does not matter."""
    return _OUTCOMES[(gt.positive, pred.positive)]


def sample_iou(
    gt_polys: Sequence[Polygon],
    pred_polys: Sequence[Polygon],
    raster: tuple[int, int] = (640, 640),
) -> float:
    """IoU between the rasterized unions of ground-truth and predicted polygons."""
    width, height = raster
    return mask_iou(rasterize(gt_polys, width, height), rasterize(pred_polys, width, height))


def siou_at_k(outcome: str, iou: float, k: int) -> float:
    """Piecewise per-sample score: min(k*IoU, 1) if TP, 1 if TN, 0 otherwise."""
    if outcome == "TP":
        return min(k * iou, 1.0)
    if outcome == "TN":
        return 1.0
    return 0.0


def _k_range(k_threshold: float) -> range:
    if not 0.0 < k_threshold <= 1.0:
        raise ValueError(f"threshold K must be in (0, 1], got {k_threshold}")
    k_max = max(1, math.floor(1.0 / k_threshold))
    return range(1, k_max + 1)


def msiou(samples: Sequence[SampleEval], k_threshold: float = 0.1) -> float:
    """Mean over k = 1..floor(1/K) of the dataset-average sIoU@k."""
    if not samples:
        raise UndefinedMetricError("msiou requires at least one sample")
    ks = _k_range(k_threshold)
    per_k = [
        sum(siou_at_k(s.outcome, s.iou, k) for s in samples) / len(samples) for k in ks
    ]
    return sum(per_k) / len(per_k)


def precision_at_k(samples: Sequence[SampleEval], k_threshold: float) -> float:
    """Fraction of samples whose sample-level IoU is strictly above K."""
    if not samples:
        raise UndefinedMetricError("precision_at_k requires at least one sample")
    if not 0.0 < k_threshold < 1.0:
        raise ValueError(f"threshold K must be in (0, 1), got {k_threshold}")
    return sum(1 for s in samples if s.iou > k_threshold) / len(samples)


def accuracy(samples: Sequence[SampleEval]) -> float:
    """(TP + TN) / (TP + TN + FP + FN) on the existence confusion counts."""
    if not samples:
        raise UndefinedMetricError("accuracy requires at least one sample")
    correct = sum(1 for s in samples if s.outcome in ("TP", "TN"))
    return correct / len(samples)


@dataclass
class PredictionRecord:
    """One line of a predictions file."""

    sample_id: str
    existence: ExistenceLabel
    polygons: list[Polygon]

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "id": self.sample_id,
                "existence": EXISTENCE_WIRE[self.existence],
                "polygons": [p.to_flat() for p in self.polygons],
            },
            sort_keys=True,
        )


def load_predictions(path) -> dict[str, PredictionRecord]:
    records: dict[str, PredictionRecord] = {}
    duplicates = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            raw = json.loads(line)
            rec = PredictionRecord(
                sample_id=str(raw["id"]),
                existence=WIRE_EXISTENCE[raw["existence"]],
                polygons=[Polygon.from_flat(c) for c in raw.get("polygons", [])],
            )
            if rec.sample_id in records:
                duplicates.append(rec.sample_id)
            records[rec.sample_id] = rec
    if duplicates:
        raise InputMismatchError(f"duplicate prediction ids: {sorted(duplicates)}", duplicates)
    return records


def save_predictions(records: Iterable[PredictionRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json_line() + "\n")


def evaluate(
    gt_samples: Sequence,
    predictions: Mapping[str, PredictionRecord],
    config: EvalConfig | None = None,
) -> MetricReport:
    """Score a prediction set against a ground-truth split.

    Every ground-truth id must appear in the predictions exactly once; extra or
    missing ids raise InputMismatchError listing the offenders. ``gt_samples``
    need ``id``, ``existence`` and ``gt_polygons`` attributes. Results are
    independent of input ordering (per-sample records are sorted by id).
    """
    config = config or EvalConfig()
    gt_ids = {s.id for s in gt_samples}
    pred_ids = set(predictions)
    missing = sorted(gt_ids - pred_ids)
    unknown = sorted(pred_ids - gt_ids)
    if missing or unknown:
        parts = []
        if missing:
            parts.append(f"missing predictions for {missing}")
        if unknown:
            parts.append(f"unknown prediction ids {unknown}")
        raise InputMismatchError("; ".join(parts), missing + unknown)

    raster = (config.raster_width, config.raster_height)
    per_sample = []
    for sample in sorted(gt_samples, key=lambda s: s.id):
        pred = predictions[sample.id]
        outcome = existence_outcome(sample.existence, pred.existence)
        if outcome == "TP":
            iou = sample_iou(sample.gt_polygons, pred.polygons, raster)
        elif outcome == "TN":
            iou = 1.0
        else:
            iou = 0.0
        per_sample.append(
            SampleEval(
                sample_id=sample.id,
                gt_positive=sample.existence.positive,
                pred_positive=pred.existence.positive,
                outcome=outcome,
                iou=iou,
            )
        )

    confusion = {key: 0 for key in ("tp", "tn", "fp", "fn")}
    for s in per_sample:
        confusion[s.outcome.lower()] += 1
    return MetricReport(
        msiou=msiou(per_sample, config.msiou_k),
        msiou_k=config.msiou_k,
        p_at_k={k: precision_at_k(per_sample, k) for k in config.p_at_k},
        accuracy=accuracy(per_sample),
        confusion=confusion,
        per_sample=per_sample,
        n=len(per_sample),
        config_echo=config.echo(),
    )


def save_report(report: MetricReport, path, include_per_sample: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(include_per_sample), fh, indent=2, sort_keys=True)
        fh.write("\n")
