import math

import numpy as np
import pytest

from navseg.geometry import (
    DegeneratePolygonError,
    InvalidPolygonError,
    MaskRaster,
    Polygon,
    ShapeMismatchError,
    mask_iou,
    normalize_polygon,
    polygon_signed_area,
    rasterize,
    resample_polygon,
    write_mask_pgm,
)

SQUARE_CW = Polygon(np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float))
SQUARE_CCW = Polygon(np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=float))


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def walk_boundary(verts: np.ndarray, targets) -> np.ndarray:
    """Sequential boundary walker: emits the point at each target arclength.

    Steps segment by segment with scalar arithmetic, independent of the
    vectorized searchsorted path used by resample_polygon.
    """
    targets = sorted((t, i) for i, t in enumerate(targets))
    out = np.zeros((len(targets), 2))
    walked = 0.0
    pos = 0
    n = len(verts)
    for seg in range(n):
        ax, ay = verts[seg]
        bx, by = verts[(seg + 1) % n]
        length = math.hypot(bx - ax, by - ay)
        while pos < len(targets) and targets[pos][0] <= walked + length:
            t, orig = targets[pos]
            frac = 0.0 if length == 0.0 else (t - walked) / length
            out[orig] = (ax + frac * (bx - ax), ay + frac * (by - ay))
            pos += 1
        walked += length
    while pos < len(targets):  # numerical spill at the very end of the loop
        out[targets[pos][1]] = verts[0]
        pos += 1
    return out


def point_in_polygon_raycast(xc: float, yc: float, verts: np.ndarray) -> bool:
    """Even-odd ray cast from the pixel center toward +x."""
    inside = False
    n = len(verts)
    for i in range(n):
        x1, y1 = verts[i]
        x2, y2 = verts[(i + 1) % n]
        if (y1 > yc) != (y2 > yc):
            xcross = (x2 - x1) * (yc - y1) / (y2 - y1) + x1
            if xc < xcross:
                inside = not inside
    return inside


def raycast_mask(polys, width, height) -> np.ndarray:
    bits = np.zeros((height, width), dtype=bool)
    for py in range(height):
        yc = (py + 0.5) / height
        for px in range(width):
            xc = (px + 0.5) / width
            bits[py, px] = any(point_in_polygon_raycast(xc, yc, p.vertices) for p in polys)
    return bits


def random_polygon(rng, n_min=3, n_max=10) -> Polygon:
    n = rng.integers(n_min, n_max + 1)
    return Polygon(rng.random((n, 2)))


def random_convex_polygon(rng, n=7) -> Polygon:
    angles = np.sort(rng.random(n) * 2 * np.pi)
    radius = 0.2 + 0.25 * rng.random(n)
    pts = 0.5 + np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    return normalize_polygon(Polygon(np.clip(pts, 0, 1)))


# ---------------------------------------------------------------------------
# signed area / orientation
# ---------------------------------------------------------------------------

def test_signed_area_unit_square_clockwise():
    assert polygon_signed_area(SQUARE_CW) == pytest.approx(1.0, abs=1e-15)


def test_signed_area_reversed_square():
    assert polygon_signed_area(SQUARE_CCW) == pytest.approx(-1.0, abs=1e-15)


def test_signed_area_collinear_is_zero():
    degenerate = Polygon(np.array([[0, 0], [0.5, 0], [1, 0]], dtype=float))
    assert polygon_signed_area(degenerate) == pytest.approx(0.0, abs=1e-15)


def test_polygon_requires_three_vertices():
    with pytest.raises(InvalidPolygonError):
        Polygon(np.array([[0, 0], [1, 1]], dtype=float))


def test_polygon_clamps_coordinates():
    p = Polygon(np.array([[-0.5, 0.2], [2.0, 0.2], [0.5, 1.7]]))
    assert p.vertices.min() >= 0.0 and p.vertices.max() <= 1.0


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_normalize_counter_clockwise_square():
    out = normalize_polygon(SQUARE_CCW)
    np.testing.assert_allclose(out.vertices, SQUARE_CW.vertices)


def test_normalize_already_canonical_unchanged():
    out = normalize_polygon(SQUARE_CW)
    np.testing.assert_array_equal(out.vertices, SQUARE_CW.vertices)


def test_normalize_rotates_start_vertex():
    shifted = Polygon(np.array([[1, 1], [0, 1], [0, 0], [1, 0]], dtype=float))
    out = normalize_polygon(shifted)
    np.testing.assert_allclose(out.vertices, SQUARE_CW.vertices)


def test_normalize_idempotent_on_random_polygons():
    rng = np.random.default_rng(7)
    for _ in range(50):
        p = random_polygon(rng)
        once = normalize_polygon(p)
        twice = normalize_polygon(once)
        np.testing.assert_array_equal(once.vertices, twice.vertices)
        assert polygon_signed_area(once) >= 0.0


def test_normalize_start_tiebreak_prefers_smaller_y():
    # (0.6, 0.0) and (0.0, 0.6) tie on x+y; smaller y wins
    p = Polygon(np.array([[0.0, 0.6], [0.6, 0.0], [1.0, 1.0]]))
    out = normalize_polygon(p)
    np.testing.assert_allclose(out.vertices[0], [0.6, 0.0])


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def test_resample_square_to_eight():
    out = resample_polygon(SQUARE_CW, 8)
    expected = np.array(
        [[0, 0], [0.5, 0], [1, 0], [1, 0.5], [1, 1], [0.5, 1], [0, 1], [0, 0.5]],
        dtype=float,
    )
    np.testing.assert_allclose(out.vertices, expected, atol=1e-12)


def test_resample_identity_for_equal_edges():
    out = resample_polygon(SQUARE_CW, 4)
    np.testing.assert_allclose(out.vertices, SQUARE_CW.vertices, atol=1e-12)


def test_resample_matches_boundary_walk_oracle():
    rng = np.random.default_rng(11)
    for _ in range(20):
        poly = normalize_polygon(random_polygon(rng, 7, 7))
        nxt = np.roll(poly.vertices, -1, axis=0)
        perimeter = float(np.hypot(*(nxt - poly.vertices).T).sum())
        targets = [i * perimeter / 6 for i in range(6)]
        expected = walk_boundary(poly.vertices, targets)
        out = resample_polygon(poly, 6)
        # the oracle emits samples in boundary order; canonicalization may rotate
        canon_expected = normalize_polygon(Polygon(expected))
        np.testing.assert_allclose(out.vertices, canon_expected.vertices, atol=1e-9)


def test_resample_hausdorff_bound_on_convex_polygons():
    rng = np.random.default_rng(3)
    for _ in range(10):
        poly = random_convex_polygon(rng)
        n_v = 6
        out = resample_polygon(poly, n_v)
        nxt = np.roll(poly.vertices, -1, axis=0)
        perimeter = float(np.hypot(*(nxt - poly.vertices).T).sum())
        dense_a = walk_boundary(poly.vertices, np.linspace(0, perimeter, 1500, endpoint=False))
        nxt_b = np.roll(out.vertices, -1, axis=0)
        perim_b = float(np.hypot(*(nxt_b - out.vertices).T).sum())
        dense_b = walk_boundary(out.vertices, np.linspace(0, perim_b, 1500, endpoint=False))
        d = np.linalg.norm(dense_a[:, None, :] - dense_b[None, :, :], axis=2)
        hausdorff = max(d.min(axis=1).max(), d.min(axis=0).max())
        assert hausdorff <= perimeter / n_v + 1e-9


def test_resample_zero_perimeter_raises():
    point = Polygon(np.array([[0.5, 0.5]] * 3))
    with pytest.raises(DegeneratePolygonError):
        resample_polygon(point, 6)


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

def test_rasterize_full_square():
    mask = rasterize([SQUARE_CW], 10, 10)
    assert mask.count() == 100


def test_rasterize_left_half():
    half = Polygon(np.array([[0, 0], [0.5, 0], [0.5, 1], [0, 1]], dtype=float))
    mask = rasterize([half], 10, 10)
    assert mask.count() == 50
    assert mask.bits[:, :5].all()
    assert not mask.bits[:, 5:].any()


def test_rasterize_empty_list():
    mask = rasterize([], 4, 4)
    assert mask.count() == 0


def test_rasterize_matches_raycast_oracle():
    rng = np.random.default_rng(5)
    for _ in range(25):
        poly = random_polygon(rng)
        mask = rasterize([poly], 32, 32)
        np.testing.assert_array_equal(mask.bits, raycast_mask([poly], 32, 32))


def test_rasterize_union_is_order_independent():
    rng = np.random.default_rng(9)
    polys = [random_polygon(rng) for _ in range(4)]
    forward = rasterize(polys, 48, 48)
    backward = rasterize(polys[::-1], 48, 48)
    np.testing.assert_array_equal(forward.bits, backward.bits)
    np.testing.assert_array_equal(forward.bits, raycast_mask(polys, 48, 48))


# ---------------------------------------------------------------------------
# mask IoU
# ---------------------------------------------------------------------------

def test_iou_identical_masks():
    mask = rasterize([SQUARE_CW], 10, 10)
    assert mask_iou(mask, mask) == 1.0


def test_iou_full_vs_half():
    full = rasterize([SQUARE_CW], 10, 10)
    half = rasterize([Polygon(np.array([[0, 0], [0.5, 0], [0.5, 1], [0, 1]], dtype=float))], 10, 10)
    assert mask_iou(full, half) == pytest.approx(0.5)


def test_iou_empty_empty_convention():
    empty = rasterize([], 8, 8)
    assert mask_iou(empty, empty) == 1.0


def test_iou_one_sided_empty():
    empty = rasterize([], 10, 10)
    full = rasterize([SQUARE_CW], 10, 10)
    assert mask_iou(empty, full) == 0.0
    assert mask_iou(full, empty) == 0.0


def test_iou_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        mask_iou(rasterize([], 4, 4), rasterize([], 4, 5))


def test_iou_symmetric_bounded_monotone():
    rng = np.random.default_rng(13)
    for _ in range(20):
        a = rasterize([random_polygon(rng)], 24, 24)
        b = rasterize([random_polygon(rng)], 24, 24)
        iou = mask_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert iou == mask_iou(b, a)
        # setting a shared pixel in both masks never decreases IoU
        grown_a = MaskRaster(24, 24, a.bits.copy())
        grown_b = MaskRaster(24, 24, b.bits.copy())
        grown_a.bits[0, 0] = True
        grown_b.bits[0, 0] = True
        assert mask_iou(grown_a, grown_b) >= iou
        assert (iou == 1.0) == np.array_equal(a.bits, b.bits)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def test_pgm_export(tmp_path):
    mask = rasterize([Polygon(np.array([[0, 0], [0.5, 0], [0.5, 1], [0, 1]], dtype=float))], 4, 2)
    out = tmp_path / "mask.pgm"
    write_mask_pgm(mask, out)
    data = out.read_bytes()
    assert data.startswith(b"P5\n4 2\n255\n")
    assert data[len(b"P5\n4 2\n255\n"):] == bytes([255, 255, 0, 0, 255, 255, 0, 0])
