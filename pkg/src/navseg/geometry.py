"""Polygon representation, canonical ordering, resampling, rasterization, mask IoU.

Coordinates are fractions of image width/height in [0, 1], with y growing
downward (image convention). A polygon is "canonical" when its vertices run
clockwise in that frame and the list starts at the vertex nearest the
top-left corner.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class InvalidPolygonError(ValueError):
    """Polygon has fewer than three vertices or malformed coordinates."""


class DegeneratePolygonError(ValueError):
    """Polygon has zero perimeter and cannot be resampled."""


class ShapeMismatchError(ValueError):
    """Two rasters with different dimensions were combined."""


@dataclass(frozen=True)
class Polygon:
    """Closed polygon with vertices in normalized [0,1]^2 image coordinates.

    Coordinates are clamped to [0,1] at construction; the vertex array is
    frozen afterwards.
    """

    vertices: np.ndarray

    def __post_init__(self) -> None:
        verts = np.asarray(self.vertices, dtype=np.float64)
        if verts.ndim != 2 or verts.shape[1] != 2:
            raise InvalidPolygonError(f"expected (n, 2) vertex array, got shape {verts.shape}")
        if verts.shape[0] < 3:
            raise InvalidPolygonError(f"polygon needs >= 3 vertices, got {verts.shape[0]}")
        if not np.isfinite(verts).all():
            raise InvalidPolygonError("polygon has non-finite coordinates")
        verts = np.clip(verts, 0.0, 1.0)
        verts.setflags(write=False)
        object.__setattr__(self, "vertices", verts)

    def __len__(self) -> int:
        return self.vertices.shape[0]

    def to_flat(self) -> list[float]:
        """Serialize as [x1, y1, ..., xn, yn]."""
        return [float(v) for v in self.vertices.reshape(-1)]

    @classmethod
    def from_flat(cls, coords: Sequence[float]) -> "Polygon":
        arr = np.asarray(coords, dtype=np.float64)
        if arr.size % 2 != 0:
            raise InvalidPolygonError(f"flat coordinate list has odd length {arr.size}")
        return cls(arr.reshape(-1, 2))


@dataclass
class MaskRaster:
    """Binary occupancy grid; bits[row, col] with row-major y-down layout."""

    width: int
    height: int
    bits: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ShapeMismatchError(f"raster dimensions must be >= 1, got {self.width}x{self.height}")
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != (self.height, self.width):
            raise ShapeMismatchError(
                f"bits shape {bits.shape} does not match {self.height}x{self.width}"
            )
        self.bits = bits

    def count(self) -> int:
        return int(self.bits.sum())


def polygon_signed_area(poly: Polygon) -> float:
    """Shoelace signed area; positive means clockwise in y-down image coordinates."""
    v = poly.vertices
    x, y = v[:, 0], v[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    return float(np.sum(x * yn - xn * y) / 2.0)


def normalize_polygon(poly: Polygon) -> Polygon:
    """Rewrite to canonical form: clockwise, starting nearest the top-left corner.

    Orientation is flipped when the signed area is negative; the start vertex
    minimizes x+y with ties broken by smaller y, then smaller x. Idempotent.
    """
    verts = poly.vertices
    if polygon_signed_area(poly) < 0.0:
        verts = verts[::-1]
    keys = list(zip(verts[:, 0] + verts[:, 1], verts[:, 1], verts[:, 0]))
    start = min(range(len(keys)), key=keys.__getitem__)
    return Polygon(np.concatenate([verts[start:], verts[:start]]))


def resample_polygon(poly: Polygon, n_v: int) -> Polygon:
    """Resample the closed boundary at n_v uniform-arclength points.

    The input must be canonical; the first sample sits on the canonical start
    vertex and the result is canonicalized again.
    """
    if n_v < 3:
        raise InvalidPolygonError(f"resample target must be >= 3 vertices, got {n_v}")
    verts = poly.vertices
    nxt = np.roll(verts, -1, axis=0)
    seg_len = np.hypot(*(nxt - verts).T)
    perimeter = float(seg_len.sum())
    if perimeter <= 0.0:
        raise DegeneratePolygonError("cannot resample a zero-perimeter polygon")
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    targets = np.arange(n_v) * (perimeter / n_v)
    idx = np.clip(np.searchsorted(cum, targets, side="right") - 1, 0, len(verts) - 1)
    span = seg_len[idx]
    frac = np.where(span > 0.0, (targets - cum[idx]) / np.where(span > 0.0, span, 1.0), 0.0)
    samples = verts[idx] + frac[:, None] * (nxt[idx] - verts[idx])
    return normalize_polygon(Polygon(samples))


def _scanline_fill(verts: np.ndarray, width: int, height: int) -> np.ndarray:
    """Even-odd interior test at pixel centers, one scanline row at a time."""
    x1, y1 = verts[:, 0], verts[:, 1]
    x2, y2 = np.roll(x1, -1), np.roll(y1, -1)
    centers_x = (np.arange(width) + 0.5) / width
    bits = np.zeros((height, width), dtype=bool)
    for row in range(height):
        yc = (row + 0.5) / height
        crossing = (y1 > yc) != (y2 > yc)
        if not crossing.any():
            continue
        xs = (x2[crossing] - x1[crossing]) * (yc - y1[crossing]) / (y2[crossing] - y1[crossing]) + x1[crossing]
        xs.sort()
        # parity of crossings strictly right of the pixel center
        n_right = xs.size - np.searchsorted(xs, centers_x, side="right")
        bits[row] = (n_right % 2).astype(bool)
    return bits


def rasterize(polys: Iterable[Polygon], width: int, height: int) -> MaskRaster:
    """Rasterize the union of polygons onto a width x height pixel grid.

    A pixel is set iff its center ((px+0.5)/width, (py+0.5)/height) lies inside
    at least one polygon under the even-odd rule. An empty polygon list yields
    an all-zero mask.
    """
    if width < 1 or height < 1:
        raise ShapeMismatchError(f"raster dimensions must be >= 1, got {width}x{height}")
    bits = np.zeros((height, width), dtype=bool)
    for poly in polys:
        bits |= _scanline_fill(poly.vertices, width, height)
    return MaskRaster(width, height, bits)


def mask_iou(a: MaskRaster, b: MaskRaster) -> float:
    """Intersection over union of two rasters; two empty masks count as 1.0."""
    if (a.width, a.height) != (b.width, b.height):
        raise ShapeMismatchError(
            f"mask dimensions differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    union = int(np.logical_or(a.bits, b.bits).sum())
    if union == 0:
        return 1.0
    inter = int(np.logical_and(a.bits, b.bits).sum())
    return inter / union


def write_mask_pgm(mask: MaskRaster, path) -> None:
    """Export as binary PGM (P5, maxval 255): 0 background, 255 target."""
    header = f"P5\n{mask.width} {mask.height}\n255\n".encode("ascii")
    payload = (mask.bits.astype(np.uint8) * 255).tobytes()
    with open(path, "wb") as fh:
        fh.write(header + payload)
