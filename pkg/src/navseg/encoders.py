"""Encoder suite: text, visual, depth-overlay and road streams on a common dim.

All four streams emit vectors of the same dimension so the downstream fusion
can combine them elementwise. The defaults are small trainable stand-ins:
a hash-vocabulary mean-pool text encoder, a 3-block strided CNN per image
stream, a vertical-ramp pseudo-depth image and a fixed trapezoid road mask.
Pretrained backbones plug in through the adapter registry without changing
any signature.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .geometry import ShapeMismatchError

PAD_ID = 0


class InvalidInstructionError(ValueError):
    """Instruction text is empty or tokenizes to nothing."""


@dataclass
class EncoderConfig:
    kind: str = "toy"  # toy | adapter
    dim: int = 256
    alpha: float = 0.5
    vocab_size: int = 4096
    max_tokens: int = 32
    trunk_channels: tuple[int, ...] = (16, 32, 64)
    share_trunk: bool = False
    freeze_trunk: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("toy", "adapter"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.vocab_size < 2 or self.max_tokens < 1 or self.dim < 1:
            raise ValueError("vocab_size >= 2, max_tokens >= 1 and dim >= 1 required")


@dataclass(frozen=True)
class Instruction:
    """Tokenized instruction; ids are < vocab_size and the list is truncated."""

    tokens: tuple[int, ...]

    @classmethod
    def from_text(cls, text: str, config: EncoderConfig) -> "Instruction":
        return cls(tuple(tokenize(text, config.vocab_size, config.max_tokens)))


def tokenize(text: str, vocab_size: int, max_tokens: int) -> list[int]:
    """Hash words into 1..vocab_size-1 (0 is reserved for padding)."""
    words = [w for w in "".join(c if c.isalnum() else " " for c in text.lower()).split() if w]
    if not words:
        raise InvalidInstructionError(f"instruction has no tokens: {text!r}")
    ids = [1 + zlib.crc32(w.encode("utf-8")) % (vocab_size - 1) for w in words]
    return ids[:max_tokens]


def batch_instructions(instructions: list[Instruction], max_tokens: int) -> tuple[Tensor, Tensor]:
    """Pad to a (B, L) id tensor plus a validity mask."""
    length = min(max(len(i.tokens) for i in instructions), max_tokens)
    ids = torch.full((len(instructions), length), PAD_ID, dtype=torch.long)
    for row, inst in enumerate(instructions):
        toks = inst.tokens[:length]
        ids[row, : len(toks)] = torch.tensor(toks, dtype=torch.long)
    return ids, ids != PAD_ID


# ---------------------------------------------------------------------------
# image-plane operations
# ---------------------------------------------------------------------------

def _check_image(img: Tensor) -> Tensor:
    if img.dim() == 3:
        img = img.unsqueeze(0)
    if img.dim() != 4 or img.shape[1] != 3:
        raise ShapeMismatchError(f"expected (B, 3, H, W) image, got shape {tuple(img.shape)}")
    return img


def pseudo_depth(img: Tensor) -> Tensor:
    """Vertical-ramp depth visualization: top row 0.0, bottom row 1.0."""
    batched = img.dim() == 4
    x = _check_image(img)
    h = x.shape[2]
    if h == 1:
        ramp = torch.zeros(1, dtype=x.dtype, device=x.device)
    else:
        ramp = torch.arange(h, dtype=x.dtype, device=x.device) / (h - 1)
    out = ramp.view(1, 1, h, 1).expand_as(x).contiguous()
    return out if batched else out[0]


def overlay(img: Tensor, depth: Tensor, alpha: float) -> Tensor:
    """Convex per-pixel blend alpha*depth + (1-alpha)*img."""
    if img.shape != depth.shape:
        raise ShapeMismatchError(f"overlay shapes differ: {tuple(img.shape)} vs {tuple(depth.shape)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * depth + (1.0 - alpha) * img


def road_mask(img: Tensor) -> Tensor:
    """Fixed drivable-area prior: a bottom trapezoid over the lower 40%.

    The trapezoid spans the full width at the bottom edge and narrows to 30%
    of the width (centered) at its top edge. Values are exactly 0 or 1.
    """
    batched = img.dim() == 4
    x = _check_image(img)
    h, w = x.shape[2], x.shape[3]
    ys = (torch.arange(h, dtype=x.dtype, device=x.device) + 0.5) / h
    xs = (torch.arange(w, dtype=x.dtype, device=x.device) + 0.5) / w
    rise = ((ys - 0.6) / 0.4).clamp(0.0, 1.0)
    half_width = 0.15 + 0.35 * rise
    inside = (ys.view(h, 1) >= 0.6) & ((xs.view(1, w) - 0.5).abs() <= half_width.view(h, 1))
    mask = inside.to(x.dtype)
    out = mask.view(1, 1, h, w).expand_as(x).contiguous()
    return out if batched else out[0]


# ---------------------------------------------------------------------------
# trainable encoders
# ---------------------------------------------------------------------------

class TextEncoder(nn.Module):
    """Mean of a trainable token-embedding table, then a bias-free linear map."""

    def __init__(self, vocab_size: int, dim: int):
        super().__init__()
        self.table = nn.Embedding(vocab_size, dim, padding_idx=PAD_ID)
        self.proj = nn.Linear(dim, dim, bias=False)

    def forward(self, token_ids: Tensor, mask: Tensor) -> Tensor:
        emb = self.table(token_ids)
        denom = mask.sum(dim=1, keepdim=True).clamp(min=1).to(emb.dtype)
        pooled = (emb * mask.unsqueeze(-1).to(emb.dtype)).sum(dim=1) / denom
        return self.proj(pooled)


class ConvTrunk(nn.Module):
    """Three strided convolution blocks with a smooth activation."""

    def __init__(self, channels: tuple[int, ...]):
        super().__init__()
        layers: list[nn.Module] = []
        prev = 3
        for ch in channels:
            layers += [nn.Conv2d(prev, ch, kernel_size=3, stride=2, padding=1), nn.GELU()]
            prev = ch
        self.blocks = nn.Sequential(*layers)
        self.out_channels = prev

    def forward(self, img: Tensor) -> Tensor:
        return self.blocks(img)


class ImageEncoder(nn.Module):
    """Trunk + global average pool + linear projection head to the common dim."""

    def __init__(self, trunk: ConvTrunk, dim: int):
        super().__init__()
        self.trunk = trunk
        self.head = nn.Linear(trunk.out_channels, dim)

    def forward(self, img: Tensor) -> Tensor:
        feat = self.trunk(img)
        pooled = feat.mean(dim=(2, 3))
        return self.head(pooled)


class EncoderSuite(nn.Module):
    """All four streams behind one object; adapters override individual stages.

    Adapter registry keys (all optional callables):
      "depth_image"  img tensor -> depth image tensor (same shape)
      "road_image"   img tensor -> mask image tensor (same shape)
      "text"         batch of Instruction -> (B, dim) tensor
      "visual" / "depth" / "road"   img tensor -> (B, dim) tensor
    """

    def __init__(self, config: EncoderConfig, adapters: Optional[dict[str, Callable]] = None):
        super().__init__()
        self.config = config
        self.adapters = dict(adapters or {})
        if config.kind == "adapter" and not self.adapters:
            raise ValueError("encoder kind 'adapter' requires at least one registered adapter")
        self.text = TextEncoder(config.vocab_size, config.dim)
        if config.share_trunk:
            trunk = ConvTrunk(config.trunk_channels)
            trunks = [trunk, trunk, trunk]
        else:
            trunks = [ConvTrunk(config.trunk_channels) for _ in range(3)]
        self.visual = ImageEncoder(trunks[0], config.dim)
        self.depth = ImageEncoder(trunks[1], config.dim)
        self.road = ImageEncoder(trunks[2], config.dim)
        if config.freeze_trunk:
            for enc in (self.visual, self.depth, self.road):
                for p in enc.trunk.parameters():
                    p.requires_grad_(False)

    def encode_text(self, token_ids: Tensor, mask: Tensor) -> Tensor:
        if "text" in self.adapters:
            return self.adapters["text"](token_ids, mask)
        return self.text(token_ids, mask)

    def encode_visual(self, img: Tensor) -> Tensor:
        if "visual" in self.adapters:
            return self.adapters["visual"](img)
        return self.visual(_check_image(img))

    def depth_image(self, img: Tensor) -> Tensor:
        if "depth_image" in self.adapters:
            return self.adapters["depth_image"](img)
        return pseudo_depth(img)

    def road_image(self, img: Tensor) -> Tensor:
        if "road_image" in self.adapters:
            return self.adapters["road_image"](img)
        return road_mask(img)

    def encode_depth(self, img: Tensor) -> Tensor:
        if "depth" in self.adapters:
            return self.adapters["depth"](img)
        img = _check_image(img)
        blended = overlay(img, self.depth_image(img), self.config.alpha)
        return self.depth(blended)

    def encode_road(self, img: Tensor) -> Tensor:
        if "road" in self.adapters:
            return self.adapters["road"](img)
        return self.road(self.road_image(_check_image(img)))


def resize_image(img: Tensor, size: int) -> Tensor:
    """Bilinear resize of a (B, 3, H, W) or (3, H, W) image to size x size."""
    batched = img.dim() == 4
    x = _check_image(img)
    out = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False)
    return out if batched else out[0]
