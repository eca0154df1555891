"""Benchmark record types: samples, track annotations, manifests."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

from ..geometry import Polygon
from ..metrics import ExistenceLabel, existence_from_count

SOURCES = ("talk2car", "kitti-v2", "synthetic")
SPLITS = ("train", "val", "test")

# published benchmark split sizes; a full real build must reproduce them
BENCHMARK_SPLIT_SIZES = {"train": 14973, "val": 1413, "test": 758}


class ManifestError(ValueError):
    """Schema violation, dangling reference, or failed consistency check."""


@dataclass
class Sample:
    """One benchmark record: image, instruction, zero or more target polygons."""

    id: str
    image_ref: str
    instruction: str
    gt_polygons: list[Polygon]
    existence: ExistenceLabel
    landmark_boxes: Optional[list[tuple[float, float, float, float]]] = None
    source: str = "synthetic"
    split: str = "train"

    def __post_init__(self) -> None:
        derived = existence_from_count(len(self.gt_polygons))
        if self.existence is not derived:
            raise ManifestError(
                f"sample {self.id}: existence {self.existence.value} inconsistent "
                f"with {len(self.gt_polygons)} polygons"
            )
        if self.source not in SOURCES:
            raise ManifestError(f"sample {self.id}: unknown source {self.source!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"sample {self.id}: unknown split {self.split!r}")

    @classmethod
    def build(cls, **kwargs) -> "Sample":
        """Construct with the existence label derived from the polygon count."""
        kwargs.setdefault("existence", existence_from_count(len(kwargs.get("gt_polygons", []))))
        return cls(**kwargs)

    def with_instruction_swapped(self, instruction: str, suffix: str = "nt") -> "Sample":
        """No-target candidate: same image, foreign instruction, no polygons."""
        return replace(
            self,
            id=f"{self.id}_{suffix}",
            instruction=instruction,
            gt_polygons=[],
            existence=ExistenceLabel.NO_TARGET,
        )

    def to_record(self) -> dict:
        record = {
            "id": self.id,
            "image_ref": self.image_ref,
            "instruction": self.instruction,
            "polygons": [p.to_flat() for p in self.gt_polygons],
            "existence": self.existence.value,
            "source": self.source,
            "split": self.split,
        }
        if self.landmark_boxes is not None:
            record["landmark_boxes"] = [list(b) for b in self.landmark_boxes]
        return record

    @classmethod
    def from_record(cls, record: dict) -> "Sample":
        boxes = record.get("landmark_boxes")
        return cls(
            id=str(record["id"]),
            image_ref=record["image_ref"],
            instruction=record["instruction"],
            gt_polygons=[Polygon.from_flat(c) for c in record["polygons"]],
            existence=ExistenceLabel(record["existence"]),
            landmark_boxes=[tuple(b) for b in boxes] if boxes is not None else None,
            source=record["source"],
            split=record["split"],
        )


@dataclass
class TrackAnnotation:
    """Per-frame landmark annotation in pre-crop frame coordinates."""

    video_id: str
    frame_index: int
    noun_phrase: str
    object_id: str
    bbox: tuple[float, float, float, float]

    def __post_init__(self) -> None:
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be >= 0, got {self.frame_index}")
        _, _, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise ValueError(f"bbox must have positive area, got {self.bbox}")


@dataclass
class Manifest:
    """All samples of a benchmark build plus its construction provenance."""

    samples: list[Sample]
    provenance: list[dict] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for split in SPLITS:
            samples = self.split(split)
            out[split] = {
                "total": len(samples),
                "no_target": sum(1 for s in samples if s.existence is ExistenceLabel.NO_TARGET),
                "single_target": sum(
                    1 for s in samples if s.existence is ExistenceLabel.SINGLE_TARGET
                ),
                "multi_target": sum(
                    1 for s in samples if s.existence is ExistenceLabel.MULTI_TARGET
                ),
            }
        return out

    def check_benchmark_counts(self) -> None:
        """Full real builds must reproduce the published split sizes."""
        got = {split: len(self.split(split)) for split in SPLITS}
        if got != BENCHMARK_SPLIT_SIZES:
            raise ManifestError(
                f"split sizes {got} do not match the benchmark sizes {BENCHMARK_SPLIT_SIZES}"
            )

    def validate_ids(self) -> None:
        seen: set[str] = set()
        for s in self.samples:
            if s.id in seen:
                raise ManifestError(f"duplicate sample id {s.id}")
            seen.add(s.id)
