import math

import numpy as np
import pytest

from lidardet.geometry import (
    Box7,
    bev_intersection_area,
    bev_iou,
    box_corners_bev,
    canonical_frame,
    clip_polygon,
    from_canonical,
    iou3d,
    iou_one_to_many,
    normalize_angle,
    points_in_box,
    polygon_area,
    to_canonical,
)


def random_box(rng, span=10.0):
    return Box7(
        rng.uniform(-span, span), rng.uniform(-span, span), rng.uniform(-2.0, 0.0),
        rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.5),
        rng.uniform(-math.pi, math.pi),
    )


def mc_iou3d(a, b, n_samples, rng):
    """Monte-Carlo IoU: sample inside the joint AABB, count membership."""
    ca = np.array([box_corners_bev(a).min(0), box_corners_bev(a).max(0)])
    cb = np.array([box_corners_bev(b).min(0), box_corners_bev(b).max(0)])
    lo = np.minimum(ca[0], cb[0])
    hi = np.maximum(ca[1], cb[1])
    zlo = min(a.cz - a.h / 2, b.cz - b.h / 2)
    zhi = max(a.cz + a.h / 2, b.cz + b.h / 2)
    pts = np.column_stack([
        rng.uniform(lo[0], hi[0], n_samples),
        rng.uniform(lo[1], hi[1], n_samples),
        rng.uniform(zlo, zhi, n_samples),
    ])
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    return inter / union if union else 0.0


def test_normalize_angle():
    assert normalize_angle(math.pi) == math.pi
    assert normalize_angle(-math.pi) == math.pi
    assert abs(normalize_angle(3 * math.pi + 0.1) - (math.pi + 0.1 - 2 * math.pi)) < 1e-12
    assert normalize_angle(0.0) == 0.0


def test_box_validation():
    with pytest.raises(ValueError):
        Box7(0, 0, 0, -1.0, 1.0, 1.0, 0.0)
    b = Box7(0, 0, 0, 2.0, 3.0, 4.0, 7.0)
    assert -math.pi < b.yaw <= math.pi
    assert abs(b.volume() - 24.0) < 1e-12


def test_canonical_identity_and_center():
    box = Box7(0, 0, 0, 2, 2, 2, 0.0)
    pts = np.array([[0.3, -0.4, 0.1]])
    assert np.array_equal(to_canonical(pts, box), pts)
    box2 = Box7(1.0, -2.0, 0.5, 2, 2, 2, 1.1)
    assert np.abs(to_canonical(np.array([[1.0, -2.0, 0.5]]), box2)).max() < 1e-12


def test_canonical_hand_rotation():
    # yaw pi/2: world (1,0,0) lands at (0,-1,0) in the box frame
    box = Box7(0, 0, 0, 2, 2, 2, math.pi / 2)
    out = to_canonical(np.array([[1.0, 0.0, 0.0]]), box)
    assert np.abs(out - np.array([[0.0, -1.0, 0.0]])).max() < 1e-12


def test_canonical_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(20):
        box = random_box(rng)
        pts = rng.normal(size=(50, 3)) * 3.0
        back = from_canonical(to_canonical(pts, box), box)
        assert np.abs(back - pts).max() < 1e-12


def brute_points_in_box(pts, box):
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    out = np.zeros(len(pts), dtype=bool)
    for i, (x, y, z) in enumerate(pts[:, :3]):
        dx, dy, dz = x - box.cx, y - box.cy, z - box.cz
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        out[i] = abs(lx) <= box.l / 2 and abs(ly) <= box.w / 2 and abs(dz) <= box.h / 2
    return out


def test_points_in_box_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(10):
        box = random_box(rng, span=3.0)
        pts = rng.uniform(-6, 6, size=(200, 3))
        assert np.array_equal(points_in_box(pts, box), brute_points_in_box(pts, box))


def test_points_in_box_boundary_inside():
    box = Box7(0, 0, 0, 2, 2, 2, 0.0)
    face = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert points_in_box(face, box).all()


def test_polygon_area_shoelace():
    square = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    assert polygon_area(square) == 1.0
    tri = np.array([[0, 0], [2, 0], [0, 2]], dtype=float)
    assert polygon_area(tri) == 2.0


def test_clip_polygon_identity_and_half():
    square = np.array([[0, 0], [2, 0], [2, 2], [0, 2]], dtype=float)
    # clipping by itself is the identity (area preserved)
    inter = clip_polygon(square, square)
    assert abs(polygon_area(inter) - 4.0) < 1e-12
    shifted = square + np.array([1.0, 0.0])
    half = clip_polygon(square, shifted)
    assert abs(polygon_area(half) - 2.0) < 1e-12


def test_corners_ccw_order():
    box = Box7(0, 0, 0, 4, 2, 1, 0.0)
    corners = box_corners_bev(box)
    assert np.abs(corners - np.array([[2, 1], [-2, 1], [-2, -1], [2, -1]])).max() < 1e-12
    assert polygon_area(corners) == 8.0


def test_bev_iou_axis_aligned_analytic():
    a = Box7(0, 0, 0, 2, 2, 1, 0.0)
    b = Box7(1, 0, 0, 2, 2, 1, 0.0)
    assert abs(bev_iou(a, b) - 4.0 / 12.0) < 1e-12


def test_iou3d_identity_and_square_symmetry():
    a = Box7(1, 2, -1, 3, 1.5, 1.4, 0.7)
    assert abs(iou3d(a, a) - 1.0) < 1e-12
    sq = Box7(0, 0, 0, 2, 2, 1, 0.0)
    sq_rot = Box7(0, 0, 0, 2, 2, 1, math.pi / 2)
    assert abs(iou3d(sq, sq_rot) - 1.0) < 1e-9


def test_iou_symmetry_and_bounds():
    rng = np.random.default_rng(2)
    for _ in range(50):
        a, b = random_box(rng, span=3.0), random_box(rng, span=3.0)
        ab, ba = iou3d(a, b), iou3d(b, a)
        assert abs(ab - ba) < 1e-12
        assert 0.0 <= ab <= 1.0


def test_iou_rigid_motion_invariance():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = random_box(rng, span=2.0), random_box(rng, span=2.0)
        base = iou3d(a, b)
        dx, dy, dyaw = rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-math.pi, math.pi)
        c, s = math.cos(dyaw), math.sin(dyaw)

        def moved(bx):
            nx = c * bx.cx - s * bx.cy + dx
            ny = s * bx.cx + c * bx.cy + dy
            return Box7(nx, ny, bx.cz, bx.l, bx.w, bx.h, normalize_angle(bx.yaw + dyaw))

        assert abs(iou3d(moved(a), moved(b)) - base) < 1e-9


def test_iou3d_monte_carlo_spot_check():
    # small version of the acceptance criterion: 30 pairs, 100k samples
    rng = np.random.default_rng(4)
    for _ in range(30):
        a = random_box(rng, span=2.0)
        b = random_box(rng, span=2.0)
        if bev_iou(a, b) == 0.0:
            continue
        est = mc_iou3d(a, b, 100_000, rng)
        assert abs(iou3d(a, b) - est) < 8e-3


def test_iou_one_to_many_matches_scalar():
    rng = np.random.default_rng(5)
    a = random_box(rng, span=2.0)
    boxes = np.stack([random_box(rng, span=3.0).as_array() for _ in range(100)])
    batch_bev = iou_one_to_many(a.as_array(), boxes, kind="bev")
    batch_3d = iou_one_to_many(a.as_array(), boxes, kind="3d")
    for i in range(100):
        other = Box7.from_array(boxes[i])
        assert abs(batch_bev[i] - bev_iou(a, other)) < 1e-12
        assert abs(batch_3d[i] - iou3d(a, other)) < 1e-12


def test_disjoint_boxes_zero():
    a = Box7(0, 0, 0, 2, 2, 2, 0.3)
    b = Box7(10, 10, 0, 2, 2, 2, -0.7)
    assert bev_iou(a, b) == 0.0
    assert iou3d(a, b) == 0.0
    assert bev_intersection_area(a, b) == 0.0
