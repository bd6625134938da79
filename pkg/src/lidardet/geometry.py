"""Oriented 3-D boxes and the exact geometry underneath IoU.

Boxes live in a z-up right-handed LiDAR frame: x forward, y left, z up.
A box is (cx, cy, cz) at the geometric center, extents (l, w, h) with l
along the heading axis, and yaw measured counterclockwise about +z from
+x, stored normalized to (-pi, pi].  Top-view (BEV) overlap of two boxes
is an exact convex polygon intersection via Sutherland-Hodgman clipping;
the 3-D IoU stacks that footprint with the vertical overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Box7",
    "normalize_angle",
    "CanonicalFrame",
    "canonical_frame",
    "to_canonical",
    "from_canonical",
    "points_in_box",
    "box_corners_bev",
    "boxes_to_corners_bev",
    "polygon_area",
    "clip_polygon",
    "bev_intersection_area",
    "bev_iou",
    "iou3d",
    "iou_one_to_many",
]

_CLIP_EPS = 1e-9  # collinearity cutoff inside the polygon clipper


def normalize_angle(a):
    """Wrap an angle to (-pi, pi]."""
    a = float(a)
    out = math.fmod(a + math.pi, 2.0 * math.pi)
    if out <= 0.0:
        out += 2.0 * math.pi
    return out - math.pi


@dataclass
class Box7:
    """Oriented box: center (cx, cy, cz), extents (l, w, h), heading yaw."""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float

    def __post_init__(self):
        for name in ("l", "w", "h"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"Box7: extent {name} must be positive, got {getattr(self, name)}")
        self.yaw = normalize_angle(self.yaw)

    def volume(self):
        return self.l * self.w * self.h

    def as_array(self):
        return np.array([self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=np.float64).reshape(7)
        return cls(*[float(v) for v in arr])


@dataclass
class CanonicalFrame:
    """Rigid transform that carries world points into a box's own frame.

    In the canonical frame the box center sits at the origin and the
    heading axis is +x, so the box interior is |x|<=l/2, |y|<=w/2, |z|<=h/2.
    """

    center: np.ndarray
    yaw: float

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64) - self.center
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        # rotate by -yaw
        out = pts.copy()
        out[..., 0] = c * pts[..., 0] + s * pts[..., 1]
        out[..., 1] = -s * pts[..., 0] + c * pts[..., 1]
        return out

    def invert(self, points):
        pts = np.asarray(points, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        out = pts.copy()
        out[..., 0] = c * pts[..., 0] - s * pts[..., 1]
        out[..., 1] = s * pts[..., 0] + c * pts[..., 1]
        return out + self.center


def canonical_frame(box):
    return CanonicalFrame(center=np.array([box.cx, box.cy, box.cz]), yaw=box.yaw)


def to_canonical(points, box):
    return canonical_frame(box).apply(points)


def from_canonical(points, box):
    return canonical_frame(box).invert(points)


def points_in_box(points, box):
    """Boolean mask of points inside the box; boundary points count as inside.

    Args:
        points: (N, 3) or (N, >=3); extra columns are ignored
        box: Box7
    Returns:
        (N,) bool mask
    """
    pts = np.asarray(points, dtype=np.float64)
    local = to_canonical(pts[:, :3], box)
    return (
        (np.abs(local[:, 0]) <= 0.5 * box.l)
        & (np.abs(local[:, 1]) <= 0.5 * box.w)
        & (np.abs(local[:, 2]) <= 0.5 * box.h)
    )


# ============================ BEV polygon work ============================


def box_corners_bev(box):
    """Four footprint corners in counterclockwise order, shape (4, 2)."""
    return boxes_to_corners_bev(box.as_array()[None, :])[0]


def boxes_to_corners_bev(boxes):
    """(N, 7) array boxes -> (N, 4, 2) counterclockwise footprint corners."""
    boxes = np.asarray(boxes, dtype=np.float64)
    hl = 0.5 * boxes[:, 3]
    hw = 0.5 * boxes[:, 4]
    # counterclockwise: (+,+), (-,+), (-,-), (+,-) in the local frame
    local = np.stack(
        [
            np.stack([hl, hw], axis=1),
            np.stack([-hl, hw], axis=1),
            np.stack([-hl, -hw], axis=1),
            np.stack([hl, -hw], axis=1),
        ],
        axis=1,
    )
    c = np.cos(boxes[:, 6])[:, None]
    s = np.sin(boxes[:, 6])[:, None]
    x = local[:, :, 0] * c - local[:, :, 1] * s + boxes[:, 0:1]
    y = local[:, :, 0] * s + local[:, :, 1] * c + boxes[:, 1:2]
    return np.stack([x, y], axis=2)


def polygon_area(poly):
    """Shoelace area of a (possibly empty) list of (x, y) vertices."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of a convex subject against a convex CCW clip polygon.

    Vertices within _CLIP_EPS of a clip edge are treated as inside, so
    touching boxes yield a degenerate (zero area) polygon instead of
    flickering on rounding noise.
    """
    output = [(float(x), float(y)) for x, y in subject]
    m = len(clip)
    for i in range(m):
        if not output:
            break
        ax, ay = float(clip[i][0]), float(clip[i][1])
        bx, by = float(clip[(i + 1) % m][0]), float(clip[(i + 1) % m][1])
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        px, py = inp[-1]
        p_side = ex * (py - ay) - ey * (px - ax)
        for qx, qy in inp:
            q_side = ex * (qy - ay) - ey * (qx - ax)
            q_in = q_side >= -_CLIP_EPS
            p_in = p_side >= -_CLIP_EPS
            if q_in:
                if not p_in:
                    t = p_side / (p_side - q_side)
                    output.append((px + t * (qx - px), py + t * (qy - py)))
                output.append((qx, qy))
            elif p_in:
                t = p_side / (p_side - q_side)
                output.append((px + t * (qx - px), py + t * (qy - py)))
            px, py, p_side = qx, qy, q_side
    return output


def bev_intersection_area(a, b):
    """Exact footprint intersection area of two boxes."""
    ca = box_corners_bev(a)
    cb = box_corners_bev(b)
    return polygon_area(clip_polygon(ca, cb))


def bev_iou(a, b):
    """Top-view IoU of two boxes' rotated footprints."""
    inter = bev_intersection_area(a, b)
    union = a.l * a.w + b.l * b.w - inter
    if union <= 0.0:
        return 0.0
    return min(max(inter / union, 0.0), 1.0)


def iou3d(a, b):
    """3-D IoU: BEV intersection area times vertical overlap over the union volume."""
    inter_area = bev_intersection_area(a, b)
    if inter_area <= 0.0:
        return 0.0
    z_lo = max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h)
    z_hi = min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h)
    dz = z_hi - z_lo
    if dz <= 0.0:
        return 0.0
    inter_vol = inter_area * dz
    union = a.volume() + b.volume() - inter_vol
    if union <= 0.0:
        return 0.0
    return min(max(inter_vol / union, 0.0), 1.0)


def _circumradii(boxes):
    return 0.5 * np.hypot(boxes[:, 3], boxes[:, 4])


def iou_one_to_many(box_arr, boxes_arr, kind="bev"):
    """IoU of one box against many, as (N,) values.

    A center-distance prefilter (footprint circumradii) zeroes pairs that
    cannot intersect; only plausible pairs reach the exact clipper.

    Args:
        box_arr: (7,) box
        boxes_arr: (N, 7) boxes
        kind: "bev" or "3d"
    """
    box_arr = np.asarray(box_arr, dtype=np.float64).reshape(7)
    boxes_arr = np.asarray(boxes_arr, dtype=np.float64).reshape(-1, 7)
    n = boxes_arr.shape[0]
    out = np.zeros(n)
    if n == 0:
        return out
    d = np.hypot(boxes_arr[:, 0] - box_arr[0], boxes_arr[:, 1] - box_arr[1])
    near = d <= _circumradii(boxes_arr) + _circumradii(box_arr[None, :])[0] + 1e-12
    if kind == "3d":
        dz = np.abs(boxes_arr[:, 2] - box_arr[2])
        near &= dz < 0.5 * (boxes_arr[:, 5] + box_arr[5])
    if not near.any():
        return out
    a = Box7.from_array(box_arr)
    fn = bev_iou if kind == "bev" else iou3d
    for i in np.flatnonzero(near):
        out[i] = fn(a, Box7.from_array(boxes_arr[i]))
    return out
