"""Procedural toy scenes: colored boxes on a road band, with instructions that
are true by construction. Scene specs live inside the image_ref string so a
manifest stays self-contained and byte-reproducible."""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Polygon
from ..metrics import ExistenceLabel
from .schema import Manifest, Sample

SCENE_PREFIX = "synthetic:"

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.70, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.60, 0.15, 0.75),
    "cyan": (0.10, 0.75, 0.80),
}

RELATIONS = ("left of", "right of", "in front of")

BACKGROUND = 0.15
ROAD_SHADE = 0.45
ROAD_TOP = 0.55  # road band covers the lower part of the scene


@dataclass
class SceneSpec:
    width: int
    height: int
    boxes: list[tuple[str, float, float, float, float]]  # (color, x, y, w, h) normalized

    def encode(self) -> str:
        doc = {"w": self.width, "h": self.height, "boxes": [list(b) for b in self.boxes]}
        return SCENE_PREFIX + json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def parse(cls, ref: str) -> "SceneSpec":
        if not ref.startswith(SCENE_PREFIX):
            raise ValueError(f"not a synthetic scene ref: {ref[:40]!r}")
        doc = json.loads(ref[len(SCENE_PREFIX):])
        return cls(width=doc["w"], height=doc["h"], boxes=[tuple(b) for b in doc["boxes"]])

    def landmark_boxes_px(self) -> list[tuple[float, float, float, float]]:
        return [
            (x * self.width, y * self.height, w * self.width, h * self.height)
            for (_, x, y, w, h) in self.boxes
        ]


def render_scene(spec: SceneSpec) -> np.ndarray:
    """Render to a (3, H, W) float32 array in [0, 1]."""
    img = np.full((3, spec.height, spec.width), BACKGROUND, dtype=np.float32)
    road_row = int(ROAD_TOP * spec.height)
    img[:, road_row:, :] = ROAD_SHADE
    for color, x, y, w, h in spec.boxes:
        rgb = PALETTE[color]
        x0, y0 = int(x * spec.width), int(y * spec.height)
        x1 = max(x0 + 1, int((x + w) * spec.width))
        y1 = max(y0 + 1, int((y + h) * spec.height))
        for c in range(3):
            img[c, y0:y1, x0:x1] = rgb[c]
    return img


def load_image(ref: str, base_dir=None) -> np.ndarray:
    """Resolve an image_ref: synthetic specs render, paths load via Pillow."""
    if ref.startswith(SCENE_PREFIX):
        return render_scene(SceneSpec.parse(ref))
    from PIL import Image

    path = Path(ref)
    if base_dir is not None and not path.is_absolute():
        path = Path(base_dir) / path
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.transpose(rgb, (2, 0, 1))


def _hexagon(x: float, y: float, w: float, h: float) -> Polygon:
    """Axis-aligned rectangle expressed as a clockwise 6-gon."""
    pts = [
        (x, y),
        (x + w / 2, y),
        (x + w, y),
        (x + w, y + h),
        (x + w / 2, y + h),
        (x, y + h),
    ]
    return Polygon(np.array(pts))


def _target_rect(box, relation: str, gap: float = 0.01):
    _, x, y, w, h = box
    if relation == "left of":
        return (x - w - gap, y, w, h)
    if relation == "right of":
        return (x + w + gap, y, w, h)
    return (x, y + h + gap, w, h)  # in front of


@dataclass
class ToyDatasetConfig:
    """Category counts are (no_target, single_target, multi_target) per split."""

    width: int = 64
    height: int = 64
    counts: dict[str, tuple[int, int, int]] = field(
        default_factory=lambda: {"train": (10, 10, 10)}
    )


def _round4(v: float) -> float:
    return round(v, 4)


class _SceneBuilder:
    def __init__(self, rng: random.Random, config: ToyDatasetConfig):
        self.rng = rng
        self.config = config
        # slot grid keeps boxes disjoint and leaves room for adjacent targets
        self.x_slots = (0.18, 0.42, 0.66)

    def _box(self, color: str, x_slot: float):
        w = _round4(self.rng.uniform(0.08, 0.13))
        h = _round4(self.rng.uniform(0.08, 0.13))
        x = _round4(x_slot + self.rng.uniform(0.0, 0.03))
        y = _round4(self.rng.uniform(0.36, 0.52))
        return (color, x, y, w, h)

    def single(self):
        colors = self.rng.sample(sorted(PALETTE), 3)
        slots = self.rng.sample(self.x_slots, 3)
        target_color = colors[0]
        n_distractors = self.rng.randint(0, 2)
        boxes = [self._box(target_color, slots[0])]
        boxes += [self._box(colors[1 + i], slots[1 + i]) for i in range(n_distractors)]
        relation = self.rng.choice(RELATIONS)
        rect = _target_rect(boxes[0], relation)
        instruction = f"stop {relation} the {target_color} box"
        return boxes, instruction, [_hexagon(*rect)]

    def multi(self):
        colors = self.rng.sample(sorted(PALETTE), 2)
        target_color = colors[0]
        n_targets = self.rng.randint(2, 3)
        slots = self.rng.sample(self.x_slots, 3)
        boxes = [self._box(target_color, slots[i]) for i in range(n_targets)]
        if n_targets == 2:
            boxes.append(self._box(colors[1], slots[2]))
        relation = "in front of"
        instruction = f"stop {relation} every {target_color} box"
        polys = [_hexagon(*_target_rect(b, relation)) for b in boxes if b[0] == target_color]
        return boxes, instruction, polys

    def no_target(self):
        colors = self.rng.sample(sorted(PALETTE), 3)
        absent = colors[0]
        slots = self.rng.sample(self.x_slots, 2)
        boxes = [self._box(colors[1 + i], slots[i]) for i in range(self.rng.randint(1, 2))]
        relation = self.rng.choice(RELATIONS)
        instruction = f"stop {relation} the {absent} box"
        return boxes, instruction, []


def generate_toy_dataset(config: ToyDatasetConfig, seed: int) -> Manifest:
    """Seed-deterministic procedural benchmark with programmatically true labels."""
    rng = random.Random(seed)
    builder = _SceneBuilder(rng, config)
    samples: list[Sample] = []
    provenance: list[dict] = []
    for split in sorted(config.counts):
        n_no, n_single, n_multi = config.counts[split]
        categories = (
            [ExistenceLabel.NO_TARGET] * n_no
            + [ExistenceLabel.SINGLE_TARGET] * n_single
            + [ExistenceLabel.MULTI_TARGET] * n_multi
        )
        rng.shuffle(categories)
        for index, category in enumerate(categories):
            if category is ExistenceLabel.NO_TARGET:
                boxes, instruction, polys = builder.no_target()
            elif category is ExistenceLabel.SINGLE_TARGET:
                boxes, instruction, polys = builder.single()
            else:
                boxes, instruction, polys = builder.multi()
            spec = SceneSpec(config.width, config.height, boxes)
            sample = Sample.build(
                id=f"{split}-{index:05d}",
                image_ref=spec.encode(),
                instruction=instruction,
                gt_polygons=polys,
                landmark_boxes=spec.landmark_boxes_px(),
                source="synthetic",
                split=split,
            )
            samples.append(sample)
            provenance.append(
                {
                    "candidate_id": sample.id,
                    "action": "generate",
                    "verifier_verdict": None,
                    "retry_index": 0,
                    "timestamp": len(provenance),
                }
            )
    return Manifest(samples=samples, provenance=provenance)
