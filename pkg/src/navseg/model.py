"""Grounding model: landmark-driven patchification, elementwise fusion, and
existence-aware polygon regression, plus checkpoint persistence and decoding.

The computation per sample:
  h_text   = text encoder output
  h_mm     = h_text * (f_vis(img) + f_depth(img)) * (f_road(img) + f_depth(img))
  h_patch  = sum over layout patches of f_vis(crop resized to a square)
  h_cmm    = (h_patch * h_text) + h_mm
  heads    = MLPs on [h_cmm ; f_road(img)]: 3-way existence softmax and
             2*n_pt vertex coordinates squashed into [0,1] by a sigmoid.

Vertices are grouped into p_max fixed slots of n_v vertices each; decoding
turns slots into canonical polygons according to the existence argmax.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .encoders import EncoderConfig, EncoderSuite, Instruction, batch_instructions, resize_image
from .geometry import Polygon, normalize_polygon, polygon_signed_area
from .metrics import ExistenceLabel

CHECKPOINT_FORMAT_VERSION = 1
DEGENERATE_SLOT_AREA = 1e-4


@dataclass
class ModelConfig:
    n_v: int = 6
    p_max: int = 4
    patch_w: int = 560
    patch_h: int = 315
    num_patches: int = 4
    patch_stride: int = 8
    patch_encode_size: int = 224
    mlp_hidden: int = 256

    def __post_init__(self) -> None:
        if self.n_v < 3:
            raise ValueError(f"n_v must be >= 3, got {self.n_v}")
        if self.p_max < 1:
            raise ValueError(f"p_max must be >= 1, got {self.p_max}")
        if self.num_patches < 1 or self.patch_stride < 1:
            raise ValueError("num_patches and patch_stride must be >= 1")

    @property
    def n_pt(self) -> int:
        return self.p_max * self.n_v


@dataclass(frozen=True)
class PatchLayout:
    """Pixel rectangles (x, y, w, h) over the source image."""

    rects: tuple[tuple[int, int, int, int], ...]


@dataclass
class Prediction:
    """Single-sample model output in plain arrays."""

    existence: np.ndarray  # (3,) probabilities over (no, single, multi)
    vertices: np.ndarray  # (n_pt, 2) in [0,1]^2

    def __post_init__(self) -> None:
        self.existence = np.asarray(self.existence, dtype=np.float64)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.existence.shape != (3,):
            raise ValueError(f"existence must have shape (3,), got {self.existence.shape}")
        if abs(float(self.existence.sum()) - 1.0) > 1e-6:
            raise ValueError(f"existence probabilities sum to {self.existence.sum()}, not 1")
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ValueError(f"vertices must have shape (n_pt, 2), got {self.vertices.shape}")
        self.vertices = np.clip(self.vertices, 0.0, 1.0)


EXISTENCE_ORDER = (
    ExistenceLabel.NO_TARGET,
    ExistenceLabel.SINGLE_TARGET,
    ExistenceLabel.MULTI_TARGET,
)


def compute_patch_layout(
    landmark_boxes: Sequence[tuple[float, float, float, float]],
    img_w: int,
    img_h: int,
    patch_w: int,
    patch_h: int,
    num_patches: int,
    stride: int = 8,
) -> PatchLayout:
    """Greedy landmark-coverage patch placement on a fixed-stride grid.

    Repeatedly picks the grid-aligned position covering the most
    not-yet-covered landmark centroids; ties prefer smaller y, then smaller x.
    With no landmarks, falls back to a vertically centered horizontal band.
    """
    if num_patches < 1:
        raise ValueError("num_patches must be >= 1")
    if patch_w > img_w or patch_h > img_h:
        raise ValueError(f"patch {patch_w}x{patch_h} does not fit inside {img_w}x{img_h}")

    if not landmark_boxes:
        y = (img_h - patch_h) // 2
        if num_patches == 1:
            xs = [(img_w - patch_w) // 2]
        else:
            xs = [round(i * (img_w - patch_w) / (num_patches - 1)) for i in range(num_patches)]
        return PatchLayout(tuple((int(x), int(y), patch_w, patch_h) for x in xs))

    centroids = np.array([(x + w / 2.0, y + h / 2.0) for x, y, w, h in landmark_boxes])
    xs_grid = np.arange(0, img_w - patch_w + 1, stride)
    ys_grid = np.arange(0, img_h - patch_h + 1, stride)
    # centroids outside the image can never be covered by an in-image patch
    coverable = (
        (centroids[:, 0] >= 0)
        & (centroids[:, 0] < img_w)
        & (centroids[:, 1] >= 0)
        & (centroids[:, 1] < img_h)
    )
    uncovered = coverable.copy()
    rects = []
    for _ in range(num_patches):
        # integral image over an (h+1, w+1) centroid histogram so a window
        # [gx, gx+pw) x [gy, gy+ph) is an exact 4-corner lookup
        hist = np.zeros((img_h + 1, img_w + 1), dtype=np.int64)
        pts = centroids[uncovered]
        if len(pts):
            np.add.at(hist, (np.floor(pts[:, 1]).astype(int), np.floor(pts[:, 0]).astype(int)), 1)
        integral = np.zeros((img_h + 2, img_w + 2), dtype=np.int64)
        integral[1:, 1:] = hist.cumsum(axis=0).cumsum(axis=1)
        counts = (
            integral[np.ix_(ys_grid + patch_h, xs_grid + patch_w)]
            - integral[np.ix_(ys_grid, xs_grid + patch_w)]
            - integral[np.ix_(ys_grid + patch_h, xs_grid)]
            + integral[np.ix_(ys_grid, xs_grid)]
        )
        flat = int(np.argmax(counts))  # row-major: smallest y, then smallest x
        gy = int(ys_grid[flat // len(xs_grid)])
        gx = int(xs_grid[flat % len(xs_grid)])
        rects.append((gx, gy, patch_w, patch_h))
        inside = (
            (centroids[:, 0] >= gx)
            & (centroids[:, 0] < gx + patch_w)
            & (centroids[:, 1] >= gy)
            & (centroids[:, 1] < gy + patch_h)
        )
        uncovered &= ~inside
    return PatchLayout(tuple(rects))


class _Mlp(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


@dataclass
class ModelOutput:
    """Batched tensors from a forward pass."""

    existence_logits: Tensor  # (B, 3)
    existence: Tensor  # (B, 3) softmax probabilities
    vertices: Tensor  # (B, n_pt, 2) in (0, 1)

    def prediction(self, index: int = 0) -> Prediction:
        return Prediction(
            existence=self.existence[index].detach().cpu().numpy(),
            vertices=self.vertices[index].detach().cpu().numpy(),
        )


def fuse_streams(h_text: Tensor, vis: Tensor, depth: Tensor, road: Tensor) -> Tensor:
    """Elementwise fusion of the four streams:
    h_text * (vis + depth) * (road + depth)."""
    return h_text * (vis + depth) * (road + depth)


class GroundingModel(nn.Module):
    def __init__(
        self,
        model_config: ModelConfig,
        encoder_config: EncoderConfig,
        adapters: Optional[dict] = None,
    ):
        super().__init__()
        self.model_config = model_config
        self.encoder_config = encoder_config
        self.encoders = EncoderSuite(encoder_config, adapters)
        feat_dim = 2 * encoder_config.dim
        self.regression_head = _Mlp(feat_dim, model_config.mlp_hidden, 2 * model_config.n_pt)
        self.classification_head = _Mlp(feat_dim, model_config.mlp_hidden, 3)

    # ---- submodule forwards -------------------------------------------------

    def vlsim_forward(self, img: Tensor, h_text: Tensor) -> tuple[Tensor, Tensor]:
        """Fused multimodal vector plus the road feature (reused by the heads)."""
        vis = self.encoders.encode_visual(img)
        depth = self.encoders.encode_depth(img)
        road = self.encoders.encode_road(img)
        if h_text.shape != vis.shape:
            raise ValueError(f"text/visual dims differ: {tuple(h_text.shape)} vs {tuple(vis.shape)}")
        return fuse_streams(h_text, vis, depth, road), road

    def ldpm_forward(self, img: Tensor, layout: PatchLayout) -> Tensor:
        """Sum of visual encodings of the layout's patches (crop then resize)."""
        if img.dim() == 3:
            img = img.unsqueeze(0)
        _, _, h, w = img.shape
        size = self.model_config.patch_encode_size
        total = None
        for (x, y, pw, ph) in layout.rects:
            if x < 0 or y < 0 or x + pw > w or y + ph > h:
                raise ValueError(f"patch {(x, y, pw, ph)} outside image {w}x{h}")
            crop = resize_image(img[:, :, y : y + ph, x : x + pw], size)
            feat = self.encoders.encode_visual(crop)
            total = feat if total is None else total + feat
        if total is None:
            raise ValueError("layout has no patches")
        return total

    def expo_forward(
        self, h_text: Tensor, h_mm: Tensor, h_patch: Tensor, road_feat: Tensor
    ) -> ModelOutput:
        h_cmm = (h_patch * h_text) + h_mm
        feats = torch.cat([h_cmm, road_feat], dim=-1)
        logits = self.classification_head(feats)
        verts = torch.sigmoid(self.regression_head(feats))
        n_pt = self.model_config.n_pt
        return ModelOutput(
            existence_logits=logits,
            existence=torch.softmax(logits, dim=-1),
            vertices=verts.view(-1, n_pt, 2),
        )

    # ---- full forward -------------------------------------------------------

    def forward(
        self, img: Tensor, token_ids: Tensor, token_mask: Tensor, layout: PatchLayout
    ) -> ModelOutput:
        if img.dim() == 3:
            img = img.unsqueeze(0)
        h_text = self.encoders.encode_text(token_ids, token_mask)
        h_mm, road_feat = self.vlsim_forward(img, h_text)
        h_patch = self.ldpm_forward(img, layout)
        return self.expo_forward(h_text, h_mm, h_patch, road_feat)

    @torch.no_grad()
    def predict(self, image: np.ndarray, instruction: str, layout: PatchLayout) -> Prediction:
        """Single-sample inference from a (3, H, W) float array and raw text."""
        self.eval()
        dtype = next(self.parameters()).dtype
        img = torch.from_numpy(np.ascontiguousarray(image)).to(dtype).unsqueeze(0)
        inst = Instruction.from_text(instruction, self.encoder_config)
        ids, mask = batch_instructions([inst], self.encoder_config.max_tokens)
        return self.forward(img, ids, mask, layout).prediction(0)


def decode_prediction(
    pred: Prediction, config: ModelConfig
) -> tuple[ExistenceLabel, list[Polygon]]:
    """Turn raw outputs into an existence label plus canonical polygons.

    Argmax ties prefer no over single over multi. no-target emits nothing;
    single-target emits slot 0; multi-target emits every slot whose polygon
    area is at least the degenerate-slot threshold.
    """
    label = EXISTENCE_ORDER[int(np.argmax(pred.existence))]
    if label is ExistenceLabel.NO_TARGET:
        return label, []
    slots = pred.vertices.reshape(config.p_max, config.n_v, 2)
    if label is ExistenceLabel.SINGLE_TARGET:
        return label, [normalize_polygon(Polygon(slots[0]))]
    polys = []
    for slot in slots:
        poly = normalize_polygon(Polygon(slot))
        if abs(polygon_signed_area(poly)) >= DEGENERATE_SLOT_AREA:
            polys.append(poly)
    return label, polys


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(
    path,
    model: GroundingModel,
    layouts: dict[str, list[list[int]]] | None = None,
    history: list[dict] | None = None,
    extra: dict | None = None,
) -> None:
    """Self-describing parameter archive with config echo and format version."""
    from dataclasses import asdict

    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.model_config),
        "encoder_config": asdict(model.encoder_config),
        "state_dict": model.state_dict(),
        "layouts": layouts or {},
        "history": history or [],
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path, adapters: Optional[dict] = None) -> tuple[GroundingModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    enc_cfg = payload["encoder_config"]
    enc_cfg["trunk_channels"] = tuple(enc_cfg["trunk_channels"])
    model = GroundingModel(ModelConfig(**payload["model_config"]), EncoderConfig(**enc_cfg), adapters)
    model.load_state_dict(payload["state_dict"])
    return model, payload
