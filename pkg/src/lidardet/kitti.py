"""KITTI-format ingestion, frame conversion, and training augmentations.

Readers cover the three per-frame artifacts (velodyne scan, label text,
calibration text); camera-frame label boxes are converted into the
internal z-up LiDAR Box7 convention. Augmentations are the usual
global flip / rotation / scaling plus ground-truth sampling backed by a
persisted crop database.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .container import read_point_sets, write_point_sets
from .geometry import Box7, from_canonical, iou_one_to_many, normalize_angle, points_in_box, to_canonical

__all__ = [
    "LabelRecord",
    "Calibration",
    "Scene",
    "GtDatabase",
    "DbCrop",
    "read_velodyne",
    "write_velodyne",
    "parse_label",
    "read_calib",
    "record_difficulty",
    "camera_box_to_lidar",
    "lidar_box_to_camera",
    "read_scene",
    "apply_global_transform",
    "augment",
    "build_gt_database",
    "save_gt_database",
    "load_gt_database",
    "gt_sample",
]

DIFFICULTIES = ("easy", "moderate", "hard", "ignored")


# ============================ velodyne scans ============================


def read_velodyne(path):
    """Read a point cloud of little-endian float32 (x, y, z, reflectance) rows.

    Returns an (N, 4) float64 array in file order.

    Raises:
        ValueError when the file size is not a multiple of 16 bytes.
    """
    n_bytes = os.path.getsize(path)
    if n_bytes % 16 != 0:
        raise ValueError(f"{path}: size {n_bytes} is not a multiple of 16 bytes")
    raw = np.fromfile(path, dtype="<f4")
    return raw.reshape(-1, 4).astype(np.float64)


def write_velodyne(path, points):
    """Write (N, 4) points as little-endian float32 rows."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    pts.astype("<f4").tofile(path)


# ============================ labels ============================


@dataclass
class LabelRecord:
    """One parsed label line in the raw camera-frame convention.

    size_hwl is (height, width, length); location is the bottom-center
    of the box in the rectified camera frame; rotation_y is the heading
    about the camera y (down) axis.
    """

    cls: str
    truncation: float
    occlusion: int
    alpha: float
    bbox: np.ndarray  # (4,) left, top, right, bottom in pixels
    size_hwl: np.ndarray  # (3,)
    location: np.ndarray  # (3,) camera frame
    rotation_y: float


def parse_label(path):
    """Parse a label file into LabelRecords (DontCare lines included).

    Raises:
        ValueError naming the file and 1-based line number on any
        malformed line.
    """
    records = []
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 15:
                raise ValueError(f"{path}:{ln}: expected 15 fields, got {len(parts)}")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}:{ln}: non-numeric field") from None
            records.append(LabelRecord(
                cls=parts[0],
                truncation=vals[0],
                occlusion=int(vals[1]),
                alpha=vals[2],
                bbox=np.array(vals[3:7]),
                size_hwl=np.array(vals[7:10]),
                location=np.array(vals[10:13]),
                rotation_y=vals[13],
            ))
    return records


def record_difficulty(rec):
    """Difficulty bucket from 2D box height, occlusion, and truncation.

    easy: height >= 40 px, fully visible, truncation <= 0.15
    moderate: height >= 25 px, occlusion <= 1, truncation <= 0.30
    hard: height >= 25 px, occlusion <= 2, truncation <= 0.50
    anything else: ignored
    """
    height = rec.bbox[3] - rec.bbox[1]
    if height >= 40.0 and rec.occlusion <= 0 and rec.truncation <= 0.15:
        return "easy"
    if height >= 25.0 and rec.occlusion <= 1 and rec.truncation <= 0.30:
        return "moderate"
    if height >= 25.0 and rec.occlusion <= 2 and rec.truncation <= 0.50:
        return "hard"
    return "ignored"


# ============================ calibration ============================


@dataclass
class Calibration:
    """Rigid camera/LiDAR calibration plus the left color projection.

    rect is the 3x3 rectifying rotation, velo_to_cam the 3x4 rigid
    transform from LiDAR to the unrectified camera frame, projection
    the 3x4 image projection (kept for completeness; box conversion
    only needs the first two).
    """

    rect: np.ndarray
    velo_to_cam: np.ndarray
    projection: np.ndarray

    @classmethod
    def identity(cls):
        eye34 = np.eye(3, 4)
        return cls(rect=np.eye(3), velo_to_cam=eye34.copy(), projection=eye34.copy())

    def lidar_to_camera_points(self, xyz):
        """Map (N, 3) LiDAR points into the rectified camera frame."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cam = xyz @ self.velo_to_cam[:, :3].T + self.velo_to_cam[:, 3]
        return cam @ self.rect.T

    def camera_to_lidar_points(self, xyz):
        """Inverse of lidar_to_camera_points."""
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        cam = xyz @ np.linalg.inv(self.rect).T
        return (cam - self.velo_to_cam[:, 3]) @ np.linalg.inv(self.velo_to_cam[:, :3]).T


def read_calib(path):
    """Parse a calibration text file of 'KEY: v v v ...' lines.

    Needs P2, R0_rect, and Tr_velo_to_cam; other lines are ignored.

    Raises:
        ValueError naming the file and line number on a malformed line,
        or naming the missing key.
    """
    fields = {}
    with open(path, "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, _, rest = line.partition(":")
            try:
                fields[key.strip()] = np.array([float(v) for v in rest.split()])
            except ValueError:
                raise ValueError(f"{path}:{ln}: non-numeric calibration value") from None
    for key, n in (("P2", 12), ("R0_rect", 9), ("Tr_velo_to_cam", 12)):
        if key not in fields:
            raise ValueError(f"{path}: missing calibration key {key}")
        if fields[key].size != n:
            raise ValueError(f"{path}: key {key} has {fields[key].size} values, expected {n}")
    return Calibration(
        rect=fields["R0_rect"].reshape(3, 3),
        velo_to_cam=fields["Tr_velo_to_cam"].reshape(3, 4),
        projection=fields["P2"].reshape(3, 4),
    )


def camera_box_to_lidar(rec, calib):
    """Convert a camera-frame label into the internal LiDAR Box7.

    The label location is the box's bottom-center, so the center gains
    half the height along LiDAR +z after the rigid transform; the
    camera-y heading becomes yaw = -(rotation_y) - pi/2 about LiDAR +z.
    """
    h, w, l = (float(v) for v in rec.size_hwl)
    bottom = calib.camera_to_lidar_points(rec.location)[0]
    yaw = normalize_angle(-rec.rotation_y - math.pi / 2.0)
    return Box7(bottom[0], bottom[1], bottom[2] + h / 2.0, l, w, h, yaw)


def lidar_box_to_camera(box, calib):
    """Inverse of camera_box_to_lidar.

    Returns (location (3,), size_hwl (3,), rotation_y).
    """
    bottom = np.array([box.cx, box.cy, box.cz - box.h / 2.0])
    location = calib.lidar_to_camera_points(bottom)[0]
    ry = normalize_angle(-box.yaw - math.pi / 2.0)
    return location, np.array([box.h, box.w, box.l]), ry


# ============================ scenes ============================


@dataclass
class Scene:
    """One frame: points, ground truth, and (optionally) calibration."""

    scene_id: str
    points: np.ndarray  # (N, 4) x, y, z, reflectance
    gt: list  # of (cls, Box7, difficulty)
    calib: Calibration | None = None


def read_scene(scene_id, velodyne_path, label_path, calib_path):
    """Assemble a Scene from the three per-frame KITTI files.

    DontCare lines carry no usable 3D box and are dropped; every other
    label becomes (class, Box7, difficulty).
    """
    calib = read_calib(calib_path)
    gt = []
    for rec in parse_label(label_path):
        if rec.cls == "DontCare":
            continue
        gt.append((rec.cls, camera_box_to_lidar(rec, calib), record_difficulty(rec)))
    return Scene(scene_id=str(scene_id), points=read_velodyne(velodyne_path), gt=gt, calib=calib)


# ============================ global augmentations ============================


def apply_global_transform(points, boxes, flip=False, angle=0.0, scale=1.0):
    """Apply one rigid + scaling augmentation to points and boxes together.

    Order: flip about the x axis (negate y and yaw), rotate about +z by
    angle (radians), then scale everything. Reflectance columns pass
    through untouched.

    Args:
        points: (N, >=3)
        boxes: list of Box7
        flip, angle, scale: the transform draw
    Returns:
        (points, boxes) new arrays/objects
    """
    pts = np.array(points, dtype=np.float64)
    xyz = pts[:, :3]
    centers = np.array([[b.cx, b.cy, b.cz] for b in boxes]).reshape(-1, 3)
    yaws = np.array([b.yaw for b in boxes])
    if flip:
        xyz[:, 1] *= -1.0
        centers[:, 1] *= -1.0
        yaws = -yaws
    if angle != 0.0:
        c, s = math.cos(angle), math.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        xyz[:, :2] = xyz[:, :2] @ rot.T
        centers[:, :2] = centers[:, :2] @ rot.T
        yaws = yaws + angle
    if scale != 1.0:
        xyz *= scale
        centers *= scale
    pts[:, :3] = xyz
    out_boxes = [
        Box7(centers[i, 0], centers[i, 1], centers[i, 2],
             b.l * scale, b.w * scale, b.h * scale, normalize_angle(yaws[i]))
        for i, b in enumerate(boxes)
    ]
    return pts, out_boxes


def augment(scene, rng):
    """Draw and apply the global augmentation triple to a scene.

    Draws, in a fixed order for stream stability: flip with probability
    0.5, rotation angle uniform on [-pi/4, pi/4], scale factor uniform
    on [0.95, 1.05].
    """
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-math.pi / 4.0, math.pi / 4.0))
    scale = float(rng.uniform(0.95, 1.05))
    boxes = [b for _, b, _ in scene.gt]
    pts, new_boxes = apply_global_transform(scene.points, boxes, flip, angle, scale)
    gt = [(cls, nb, diff) for (cls, _, diff), nb in zip(scene.gt, new_boxes)]
    return Scene(scene_id=scene.scene_id, points=pts, gt=gt, calib=scene.calib)


# ============================ gt database ============================


@dataclass
class DbCrop:
    """One harvested object: class, stored world pose, canonical points."""

    cls: str
    difficulty: str
    box: Box7
    points: np.ndarray  # (M, 3) canonical (box) frame, float32 grid


@dataclass
class GtDatabase:
    crops: list = field(default_factory=list)

    def by_class(self, cls):
        return [c for c in self.crops if c.cls == cls]


def build_gt_database(scenes, min_points=5):
    """Harvest per-object foreground crops from training scenes.

    Every non-ignored gt box with at least min_points inside keeps its
    in-box points in the canonical box frame (quantized to float32 so
    the database round-trips through its container bit-exactly).
    """
    db = GtDatabase()
    for scene in scenes:
        xyz = np.asarray(scene.points, dtype=np.float64)[:, :3]
        for cls, box, difficulty in scene.gt:
            mask = points_in_box(xyz, box)
            if int(mask.sum()) < min_points:
                continue
            canon = to_canonical(xyz[mask], box).astype(np.float32).astype(np.float64)
            db.crops.append(DbCrop(cls=cls, difficulty=difficulty, box=box, points=canon))
    return db


def save_gt_database(db, path):
    """Write crops to the point-set container plus a text index at path + '.index'."""
    write_point_sets(path, [c.points for c in db.crops])
    with open(path + ".index", "w", encoding="ascii") as fh:
        for c in db.crops:
            vals = " ".join(repr(float(v)) for v in c.box.as_array())
            fh.write(f"{c.cls} {c.difficulty} {vals}\n")


def load_gt_database(path):
    """Inverse of save_gt_database.

    Raises:
        ValueError when the index and container disagree on crop count
        or an index line is malformed.
    """
    sets = read_point_sets(path)
    crops = []
    with open(path + ".index", "r", encoding="ascii") as fh:
        for ln, line in enumerate(fh, start=1):
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(f"{path}.index:{ln}: expected 9 fields, got {len(parts)}")
            if ln > len(sets):
                raise ValueError(f"{path}.index: more index lines than point sets")
            box = Box7.from_array(np.array([float(v) for v in parts[2:]]))
            crops.append(DbCrop(cls=parts[0], difficulty=parts[1], box=box, points=sets[ln - 1]))
    if len(crops) != len(sets):
        raise ValueError(f"{path}.index: {len(crops)} index lines for {len(sets)} point sets")
    return GtDatabase(crops=crops)


def gt_sample(scene, db, rng, max_samples=15):
    """Paste database crops into a scene at their stored poses.

    Up to max_samples distinct crops are drawn; a candidate survives
    only when its box has zero BEV overlap with every existing box
    (original gt and crops accepted before it). Accepted crop points
    are appended with zero reflectance and their boxes join the gt.
    """
    if not db.crops:
        raise ValueError("gt_sample: empty database")
    n_draw = min(max_samples, len(db.crops))
    candidates = rng.permutation(len(db.crops))[:n_draw]
    boxes = [b.as_array() for _, b, _ in scene.gt]
    pts = np.asarray(scene.points, dtype=np.float64)
    added_pts = [pts]
    gt = list(scene.gt)
    for ci in candidates:
        crop = db.crops[ci]
        arr = crop.box.as_array()
        if boxes:
            ious = iou_one_to_many(arr, np.stack(boxes), kind="bev")
            if (ious > 0.0).any():
                continue
        world = from_canonical(crop.points, crop.box)
        block = np.zeros((world.shape[0], pts.shape[1]))
        block[:, :3] = world
        added_pts.append(block)
        boxes.append(arr)
        gt.append((crop.cls, crop.box, crop.difficulty))
    return Scene(scene_id=scene.scene_id, points=np.concatenate(added_pts, axis=0),
                 gt=gt, calib=scene.calib)
