"""Trace binary masks into boundary polygons.

Used when ground truth arrives as raster masks but training targets need
polygons. Outer boundaries only: interior holes are dropped, since the
raster-union reconstruction cannot represent them anyway.
"""
from __future__ import annotations

import numpy as np

from ..geometry import Polygon, polygon_signed_area, normalize_polygon


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Simplify an open polyline, always keeping the endpoints."""
    if len(points) <= 2:
        return points
    dists = _point_segment_distance(points[1:-1], points[0], points[-1])
    idx = int(np.argmax(dists))
    if dists[idx] <= tolerance:
        return np.array([points[0], points[-1]])
    split = idx + 1
    left = _douglas_peucker(points[: split + 1], tolerance)
    right = _douglas_peucker(points[split:], tolerance)
    return np.concatenate([left[:-1], right])


def _simplify_ring(ring: np.ndarray, tolerance: float) -> np.ndarray:
    """Simplify a closed ring by splitting at the vertex farthest from vertex 0."""
    if len(ring) <= 4:
        return ring
    far = int(np.argmax(np.linalg.norm(ring - ring[0], axis=1)))
    if far == 0:
        return ring
    first = _douglas_peucker(ring[: far + 1], tolerance)
    second = _douglas_peucker(np.concatenate([ring[far:], ring[:1]]), tolerance)
    return np.concatenate([first[:-1], second[:-1]])


def trace_raster_to_polygons(
    bits: np.ndarray, tolerance: float = 0.01, min_area: float = 1e-4
) -> list[Polygon]:
    """Extract simplified outer-boundary polygons in normalized coordinates.

    `tolerance` is the boundary simplification distance in normalized units;
    regions smaller than `min_area` (fraction of the image) are dropped.
    """
    from skimage import measure

    bits = np.asarray(bits, dtype=bool)
    height, width = bits.shape
    padded = np.zeros((height + 2, width + 2), dtype=float)
    padded[1:-1, 1:-1] = bits.astype(float)
    polygons = []
    for contour in measure.find_contours(padded, 0.5):
        # (row, col) array indices -> normalized pixel-center (x, y)
        xs = (contour[:, 1] - 1.0 + 0.5) / width
        ys = (contour[:, 0] - 1.0 + 0.5) / height
        ring = np.stack([xs, ys], axis=1)
        if np.allclose(ring[0], ring[-1]):
            ring = ring[:-1]
        if len(ring) < 3:
            continue
        simplified = _simplify_ring(ring, tolerance)
        if len(simplified) < 3:
            continue
        poly = Polygon(np.clip(simplified, 0.0, 1.0))
        area = polygon_signed_area(poly)
        # outer boundaries of filled regions come out clockwise in y-down
        # coordinates; holes have the opposite orientation and are skipped
        if area < min_area:
            continue
        polygons.append(normalize_polygon(poly))
    return polygons
