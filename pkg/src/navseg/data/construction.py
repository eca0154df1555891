"""Benchmark construction: wide-frame cropping, multi-target frame mining,
instruction swapping with verifier-gated no-target synthesis, and template
filling with a rules-based singularizer."""
from __future__ import annotations

import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import json

import numpy as np

from .schema import Sample, TrackAnnotation
from .verifier import LandmarkVerifier, VerifierVerdict

# wide-format source frames are 1280x384; the benchmark crop is 656x369,
# horizontally centered and anchored to the bottom of the frame
WIDE_WIDTH, WIDE_HEIGHT = 1280, 384
CROP_WIDTH, CROP_HEIGHT = 656, 369
CROP_X = (WIDE_WIDTH - CROP_WIDTH) // 2  # 312
CROP_Y = WIDE_HEIGHT - CROP_HEIGHT  # 15

EXCLUSION_WINDOW = 20


class TemplateError(ValueError):
    """Template has no landmark slots."""


class PipelineError(RuntimeError):
    """Construction step failed; the message names the offending sample ids."""


@dataclass
class RemappedBox:
    """Box translated into crop coordinates, clipped to the crop window."""

    x: float
    y: float
    w: float
    h: float
    visible_fraction: float
    clipped: bool


def _intersection(a, b):
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    x0, y0 = max(ax, bx), max(ay, by)
    x1, y1 = min(ax + aw, bx + bw), min(ay + ah, by + bh)
    return (x0, y0, max(0.0, x1 - x0), max(0.0, y1 - y0))


def crop_wide_frame(
    image: np.ndarray, boxes: Sequence[tuple[float, float, float, float]]
) -> tuple[np.ndarray, list[RemappedBox]]:
    """Crop a (3, 384, 1280) frame to the lower-center 656x369 window and remap
    boxes into crop coordinates, flagging any that lost area."""
    if image.shape != (3, WIDE_HEIGHT, WIDE_WIDTH):
        raise ValueError(
            f"expected (3, {WIDE_HEIGHT}, {WIDE_WIDTH}) frame, got {image.shape}"
        )
    window = (CROP_X, CROP_Y, CROP_WIDTH, CROP_HEIGHT)
    cropped = image[:, CROP_Y : CROP_Y + CROP_HEIGHT, CROP_X : CROP_X + CROP_WIDTH]
    remapped = []
    for box in boxes:
        ix, iy, iw, ih = _intersection(box, window)
        area = box[2] * box[3]
        visible = (iw * ih) / area if area > 0 else 0.0
        remapped.append(
            RemappedBox(
                x=ix - CROP_X,
                y=iy - CROP_Y,
                w=iw,
                h=ih,
                visible_fraction=visible,
                clipped=visible < 1.0,
            )
        )
    return np.ascontiguousarray(cropped), remapped


def bbox_valid(
    bbox: tuple[float, float, float, float], window: tuple[float, float, float, float]
) -> bool:
    """True iff strictly more than half of the box area lies inside the window."""
    _, _, iw, ih = _intersection(bbox, window)
    area = bbox[2] * bbox[3]
    if area <= 0:
        raise ValueError(f"bbox must have positive area, got {bbox}")
    return (iw * ih) / area > 0.5


def select_multi_target_frames(
    annotations: Iterable[TrackAnnotation],
    window: tuple[float, float, float, float] = (CROP_X, CROP_Y, CROP_WIDTH, CROP_HEIGHT),
    exclusion: int = EXCLUSION_WINDOW,
) -> list[tuple[str, int, str, tuple[str, ...]]]:
    """Pick frames where a noun phrase has >= 2 valid landmarks, skipping the
    `exclusion` frames after each pick for that same (video, phrase)."""
    groups: dict[tuple[str, str], dict[int, set[str]]] = {}
    for ann in annotations:
        if not bbox_valid(ann.bbox, window):
            continue
        frames = groups.setdefault((ann.video_id, ann.noun_phrase), {})
        frames.setdefault(ann.frame_index, set()).add(ann.object_id)
    selected = []
    for (video_id, phrase) in sorted(groups):
        frames = groups[(video_id, phrase)]
        next_eligible = 0
        for frame in sorted(frames):
            if frame < next_eligible:
                continue
            objects = frames[frame]
            if len(objects) >= 2:
                selected.append((video_id, frame, phrase, tuple(sorted(objects))))
                next_eligible = frame + exclusion + 1
    return selected


def swap_instructions(samples: Sequence[Sample], rng_seed: int) -> list[Sample]:
    """Derangement-style candidate set: every sample gets another sample's
    instruction (never its own), polygons cleared, existence reset to no-target."""
    if len(samples) < 2:
        raise ValueError(f"instruction swapping needs >= 2 samples, got {len(samples)}")
    rng = random.Random(rng_seed)
    order = list(range(len(samples)))
    rng.shuffle(order)
    donor = {}
    for pos, idx in enumerate(order):
        donor[idx] = order[(pos + 1) % len(order)]  # cyclic shift: a derangement
    return [
        samples[i].with_instruction_swapped(samples[donor[i]].instruction)
        for i in range(len(samples))
    ]


class ProvenanceLog:
    """Append-only construction log; timestamps are a logical counter so
    builds stay byte-reproducible."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.entries: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, candidate_id: str, action: str, verdict, retry_index: int) -> None:
        entry = {
            "candidate_id": candidate_id,
            "action": action,
            "verifier_verdict": verdict,
            "retry_index": retry_index,
            "timestamp": len(self.entries),
        }
        self.entries.append(entry)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")


def verify_no_target(
    candidate: Sample, verifier: LandmarkVerifier, log: Optional[ProvenanceLog] = None,
    retry_index: int = 0,
) -> bool:
    """One verifier exchange: accepted iff the landmark is reported absent."""
    verdict = verifier.assess(candidate.image_ref, candidate.instruction)
    if log is not None:
        log.append(
            candidate.id,
            "verify",
            "absent" if not verdict.present else "present",
            retry_index,
        )
    return not verdict.present


def build_no_target_samples(
    samples: Sequence[Sample],
    verifier: LandmarkVerifier,
    rng_seed: int,
    max_retries: int = 3,
    log: Optional[ProvenanceLog] = None,
) -> list[Sample]:
    """Swap instructions, verify each candidate, re-swap on 'present' verdicts
    up to max_retries, and discard (with a log entry) on exhaustion."""
    candidates = swap_instructions(samples, rng_seed)
    rng = random.Random(rng_seed + 1)
    accepted = []
    for idx, candidate in enumerate(candidates):
        own = samples[idx].instruction
        kept = None
        for retry in range(max_retries + 1):
            if verify_no_target(candidate, verifier, log, retry):
                kept = candidate
                break
            if retry == max_retries:
                break
            # re-swap: deterministic draw of a different donor instruction
            pool = [s.instruction for s in samples if s.instruction not in (own, candidate.instruction)]
            if not pool:
                break
            candidate = samples[idx].with_instruction_swapped(rng.choice(pool))
        if kept is not None:
            accepted.append(kept)
            if log is not None:
                log.append(kept.id, "accept", "absent", 0)
        elif log is not None:
            log.append(candidate.id, "discard", "present", max_retries)
    return accepted


# ---------------------------------------------------------------------------
# instruction templates
# ---------------------------------------------------------------------------

_SLOT_RE = re.compile(r"<landmark>(.*?)</landmark>", re.DOTALL)

_IRREGULAR_SINGULARS = {
    "people": "person",
    "children": "child",
    "men": "man",
    "women": "woman",
    "buses": "bus",
    "taxis": "taxi",
}


def singularize_word(word: str) -> str:
    lower = word.lower()
    if lower in _IRREGULAR_SINGULARS:
        return _IRREGULAR_SINGULARS[lower]
    if lower.endswith("ies") and len(lower) > 3:
        return lower[:-3] + "y"
    if lower.endswith("es") and lower[:-2].endswith(("s", "x", "z", "ch", "sh")):
        return lower[:-2]
    if lower.endswith("s") and not lower.endswith("ss"):
        return lower[:-1]
    return lower


def singularize_phrase(phrase: str) -> str:
    return " ".join(singularize_word(w) for w in phrase.split())


def fill_template(
    template: str,
    noun_phrase: str,
    singularizer: Optional[Callable[[str], str]] = None,
) -> str:
    """Replace every <landmark>...</landmark> slot with the singularized phrase."""
    if not _SLOT_RE.search(template):
        raise TemplateError(f"template has no landmark slots: {template!r}")
    singular = (singularizer or singularize_phrase)(noun_phrase)
    return _SLOT_RE.sub(singular, template)
