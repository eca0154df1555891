"""Training: slot-target assembly, combined existence/vertex loss, the
warmup-plateau-decay schedule, and best-validation checkpoint selection.

The per-sample loss is cross-entropy on the existence distribution plus
lambda_pt times the summed L1 error over the vertices of valid slots; samples
without targets contribute no vertex term, and unused slots of multi-target
samples are masked out rather than penalized.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .data.synthetic import load_image
from .geometry import Polygon, normalize_polygon, resample_polygon
from .metrics import (
    EvalConfig,
    ExistenceLabel,
    SampleEval,
    accuracy,
    existence_outcome,
    msiou,
    sample_iou,
)
from .model import (
    GroundingModel,
    ModelConfig,
    ModelOutput,
    PatchLayout,
    Prediction,
    compute_patch_layout,
    decode_prediction,
)
from .encoders import Instruction, batch_instructions

logger = logging.getLogger(__name__)

LABEL_INDEX = {
    ExistenceLabel.NO_TARGET: 0,
    ExistenceLabel.SINGLE_TARGET: 1,
    ExistenceLabel.MULTI_TARGET: 2,
}


class DivergenceError(RuntimeError):
    """Training loss became non-finite; message carries epoch and step."""


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 384
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    lambda_pt: float = 3.0
    warmup_epochs: int = 5
    decay_epoch: int = 75
    decay_factor: float = 0.1
    val_every: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.warmup_epochs < self.decay_epoch < self.epochs:
            raise ValueError(
                f"need warmup_epochs < decay_epoch < epochs, got "
                f"{self.warmup_epochs} / {self.decay_epoch} / {self.epochs}"
            )
        if self.lambda_pt <= 0:
            raise ValueError(f"lambda_pt must be positive, got {self.lambda_pt}")


@dataclass
class TargetTensor:
    existence: ExistenceLabel
    vertex_targets: np.ndarray  # (n_pt, 2)
    slot_valid: np.ndarray  # (p_max,) bool

    def __post_init__(self) -> None:
        self.vertex_targets = np.asarray(self.vertex_targets, dtype=np.float64)
        self.slot_valid = np.asarray(self.slot_valid, dtype=bool)


@dataclass
class LossBreakdown:
    ce: float
    point: float
    lambda_pt: float

    @property
    def total(self) -> float:
        return self.ce + self.lambda_pt * self.point


def polygon_targets(gt_polys: Sequence[Polygon], config: ModelConfig) -> TargetTensor:
    """Resample each ground-truth polygon to n_v vertices and assign slots in
    centroid-x order (ties: centroid y); surplus polygons beyond p_max drop."""
    resampled = [resample_polygon(normalize_polygon(p), config.n_v) for p in gt_polys]
    order = sorted(
        range(len(resampled)),
        key=lambda i: (resampled[i].vertices[:, 0].mean(), resampled[i].vertices[:, 1].mean()),
    )
    if len(order) > config.p_max:
        logger.warning(
            "sample has %d ground-truth polygons but only %d slots; dropping %d",
            len(order),
            config.p_max,
            len(order) - config.p_max,
        )
        order = order[: config.p_max]
    vertex_targets = np.full((config.n_pt, 2), 0.5)
    slot_valid = np.zeros(config.p_max, dtype=bool)
    for slot, idx in enumerate(order):
        vertex_targets[slot * config.n_v : (slot + 1) * config.n_v] = resampled[idx].vertices
        slot_valid[slot] = True
    if len(gt_polys) == 0:
        existence = ExistenceLabel.NO_TARGET
    elif len(gt_polys) == 1:
        existence = ExistenceLabel.SINGLE_TARGET
    else:
        existence = ExistenceLabel.MULTI_TARGET
    return TargetTensor(existence=existence, vertex_targets=vertex_targets, slot_valid=slot_valid)


def loss(pred: Prediction, target: TargetTensor, lambda_pt: float = 3.0) -> LossBreakdown:
    """Single-sample loss on decoded arrays (training uses the tensor path)."""
    label = LABEL_INDEX[target.existence]
    ce = -float(np.log(pred.existence[label]))
    point = 0.0
    if target.existence is not ExistenceLabel.NO_TARGET:
        n_v = target.vertex_targets.shape[0] // target.slot_valid.shape[0]
        diff = np.abs(pred.vertices - target.vertex_targets)
        mask = np.repeat(target.slot_valid, n_v)
        point = float(diff[mask].sum())
    return LossBreakdown(ce=ce, point=point, lambda_pt=lambda_pt)


def batch_loss(
    output: ModelOutput,
    labels: Tensor,
    vertex_targets: Tensor,
    slot_mask: Tensor,
    lambda_pt: float,
    n_v: int,
) -> tuple[Tensor, Tensor, Tensor]:
    """Mean over the batch of (ce + lambda_pt * masked L1). Returns the batch
    totals (for backward) plus per-batch mean ce and point terms."""
    ce = F.cross_entropy(output.existence_logits, labels, reduction="none")
    diff = (output.vertices - vertex_targets).abs()
    mask = slot_mask.repeat_interleave(n_v, dim=1).unsqueeze(-1).to(diff.dtype)
    point = (diff * mask).sum(dim=(1, 2))
    total = ce + lambda_pt * point
    return total.mean(), ce.mean(), point.mean()


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to the base rate, plateau, then one multiplicative decay."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.warmup_epochs:
        return config.lr * (epoch + 1) / config.warmup_epochs
    if epoch >= config.decay_epoch:
        return config.lr * config.decay_factor
    return config.lr


@dataclass
class ValidationRecord:
    epoch: int
    msiou: float
    accuracy: float


def select_checkpoint(history: Sequence[ValidationRecord]) -> ValidationRecord:
    """Highest validation score wins; ties go to the earliest epoch."""
    if not history:
        raise ValueError("empty validation history")
    return min(history, key=lambda rec: (-rec.msiou, rec.epoch))


@dataclass
class TrainResult:
    history: list[ValidationRecord]
    best: ValidationRecord
    best_state: dict
    layouts: dict[str, PatchLayout]
    log_records: list[dict]


# ---------------------------------------------------------------------------
# patch layouts per image size
# ---------------------------------------------------------------------------

def split_hash(samples) -> str:
    digest = hashlib.sha256()
    for s in sorted(samples, key=lambda s: s.id):
        digest.update(
            json.dumps(
                [s.id, s.image_ref, s.landmark_boxes or []], sort_keys=True
            ).encode("utf-8")
        )
    return digest.hexdigest()


def layouts_for_sizes(
    boxes_by_size: dict[str, list], config: ModelConfig
) -> dict[str, PatchLayout]:
    layouts = {}
    for key in sorted(boxes_by_size):
        w, h = (int(v) for v in key.split("x"))
        layouts[key] = compute_patch_layout(
            boxes_by_size[key], w, h, config.patch_w, config.patch_h,
            config.num_patches, config.patch_stride,
        )
    return layouts


def save_layout_cache(path, samples, layouts: dict[str, PatchLayout]) -> None:
    doc = {
        "split_hash": split_hash(samples),
        "layouts": {k: [list(r) for r in v.rects] for k, v in layouts.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_layout_cache(path, samples) -> Optional[dict[str, PatchLayout]]:
    path = Path(path)
    if not path.exists():
        return None
    doc = json.loads(path.read_text())
    if doc.get("split_hash") != split_hash(samples):
        return None
    return {
        k: PatchLayout(tuple(tuple(int(v) for v in r) for r in rects))
        for k, rects in doc["layouts"].items()
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class _Prepared:
    image: Tensor
    size_key: str
    instruction: Instruction
    label: int
    vertex_targets: Tensor
    slot_mask: Tensor


def _prepare(samples, model: GroundingModel, base_dir=None) -> list[_Prepared]:
    prepared = []
    cfg = model.model_config
    for s in samples:
        image = torch.from_numpy(load_image(s.image_ref, base_dir)).float()
        target = polygon_targets(s.gt_polygons, cfg)
        prepared.append(
            _Prepared(
                image=image,
                size_key=f"{image.shape[2]}x{image.shape[1]}",
                instruction=Instruction.from_text(s.instruction, model.encoder_config),
                label=LABEL_INDEX[target.existence],
                vertex_targets=torch.from_numpy(target.vertex_targets).float(),
                slot_mask=torch.from_numpy(target.slot_valid.astype(np.float32)),
            )
        )
    return prepared


def _layouts_for(prepared: list[_Prepared], samples, config: ModelConfig) -> dict[str, PatchLayout]:
    boxes_by_size: dict[str, list] = {}
    for p, s in zip(prepared, samples):
        boxes_by_size.setdefault(p.size_key, []).extend(s.landmark_boxes or [])
    return layouts_for_sizes(boxes_by_size, config)


def _group_forward(
    model: GroundingModel,
    prepared: list[_Prepared],
    indices: list[int],
    layouts: dict[str, PatchLayout],
) -> tuple[ModelOutput, Tensor, Tensor, Tensor]:
    items = [prepared[i] for i in indices]
    images = torch.stack([it.image for it in items])
    ids, mask = batch_instructions([it.instruction for it in items], model.encoder_config.max_tokens)
    size_key = items[0].size_key
    layout = layouts.get(size_key) or _fallback_layout(size_key, model.model_config)
    output = model(images, ids, mask, layout)
    labels = torch.tensor([it.label for it in items], dtype=torch.long)
    verts = torch.stack([it.vertex_targets for it in items])
    slots = torch.stack([it.slot_mask for it in items])
    return output, labels, verts, slots


def _fallback_layout(size_key: str, config: ModelConfig) -> PatchLayout:
    w, h = (int(v) for v in size_key.split("x"))
    return compute_patch_layout(
        [], w, h, config.patch_w, config.patch_h, config.num_patches, config.patch_stride
    )


def validate(
    model: GroundingModel,
    val_samples,
    layouts: dict[str, PatchLayout],
    eval_config: EvalConfig,
    base_dir=None,
) -> tuple[float, float]:
    """Validation msIoU and existence accuracy from decoded predictions."""
    model.eval()
    evals = []
    raster = (eval_config.raster_width, eval_config.raster_height)
    with torch.no_grad():
        for s in val_samples:
            image = load_image(s.image_ref, base_dir)
            size_key = f"{image.shape[2]}x{image.shape[1]}"
            layout = layouts.get(size_key) or _fallback_layout(size_key, model.model_config)
            pred = model.predict(image, s.instruction, layout)
            label, polys = decode_prediction(pred, model.model_config)
            outcome = existence_outcome(s.existence, label)
            if outcome == "TP":
                iou = sample_iou(s.gt_polygons, polys, raster)
            elif outcome == "TN":
                iou = 1.0
            else:
                iou = 0.0
            evals.append(
                SampleEval(s.id, s.existence.positive, label.positive, outcome, iou)
            )
    model.train()
    return msiou(evals, eval_config.msiou_k), accuracy(evals)


def train(
    model: GroundingModel,
    train_samples,
    val_samples,
    config: TrainConfig,
    eval_config: Optional[EvalConfig] = None,
    log_path=None,
    base_dir=None,
    layouts: Optional[dict[str, PatchLayout]] = None,
) -> TrainResult:
    """Deterministic full training run returning the best-validation state.

    Mini-batches are drawn in a seed-determined order; validation runs every
    val_every epochs (and on the final epoch), and the returned state is the
    one with the highest validation msIoU, earliest epoch on ties. A
    precomputed layout map (e.g. from the cache file) skips recomputation.
    """
    if not train_samples or not val_samples:
        raise ValueError("train and validation splits must be non-empty")
    eval_config = eval_config or EvalConfig()
    torch.manual_seed(config.seed)
    rng = random.Random(config.seed)

    prepared = _prepare(train_samples, model, base_dir)
    if layouts is None:
        layouts = _layouts_for(prepared, train_samples, model.model_config)
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=config.lr,
        betas=config.betas,
        weight_decay=config.weight_decay,
    )

    n = len(prepared)
    history: list[ValidationRecord] = []
    log_records: list[dict] = []
    best: Optional[ValidationRecord] = None
    best_state: dict = {}
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        model.train()
        for epoch in range(config.epochs):
            rate = lr_at(epoch, config)
            for group in optimizer.param_groups:
                group["lr"] = rate
            order = rng.sample(range(n), n)
            epoch_records = []
            for step, start in enumerate(range(0, n, config.batch_size)):
                batch = order[start : start + config.batch_size]
                # sub-batch per image size; one optimizer step per batch
                by_size: dict[str, list[int]] = {}
                for i in batch:
                    by_size.setdefault(prepared[i].size_key, []).append(i)
                optimizer.zero_grad()
                total_sum = None
                ce_sum = 0.0
                point_sum = 0.0
                for size_key in sorted(by_size):
                    indices = by_size[size_key]
                    output, labels, verts, slots = _group_forward(model, prepared, indices, layouts)
                    total, ce, point = batch_loss(
                        output, labels, verts, slots, config.lambda_pt, model.model_config.n_v
                    )
                    weight = len(indices) / len(batch)
                    piece = total * weight
                    total_sum = piece if total_sum is None else total_sum + piece
                    ce_sum += float(ce.detach()) * weight
                    point_sum += float(point.detach()) * weight
                if not torch.isfinite(total_sum):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch} step {step}"
                    )
                total_sum.backward()
                optimizer.step()
                epoch_records.append(
                    {
                        "epoch": epoch,
                        "step": step,
                        "ce": ce_sum,
                        "point": point_sum,
                        "total": float(total_sum.detach()),
                        "lr": rate,
                    }
                )
            if (epoch + 1) % config.val_every == 0 or epoch == config.epochs - 1:
                val_msiou, val_acc = validate(model, val_samples, layouts, eval_config, base_dir)
                record = ValidationRecord(epoch=epoch, msiou=val_msiou, accuracy=val_acc)
                history.append(record)
                epoch_records[-1]["val_msiou"] = val_msiou
                if best is None or val_msiou > best.msiou:
                    best = record
                    best_state = {
                        k: v.detach().clone() for k, v in model.state_dict().items()
                    }
            for rec in epoch_records:
                log_records.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    assert best is not None  # epochs >= 1 guarantees at least one validation
    return TrainResult(
        history=history,
        best=best,
        best_state=best_state,
        layouts=layouts,
        log_records=log_records,
    )
