"""Average-precision evaluation for 3D detections, KITTI style.

Matching is greedy per scene in descending score order; precision is
interpolated as a running max from the right and sampled at 11 or 40
recall positions; distance-range buckets follow the planar distance of
the ground-truth centers, upper-inclusive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .geometry import iou_one_to_many

__all__ = [
    "EvalConfig",
    "DEFAULT_IOU_THRESHOLDS",
    "DIFFICULTY_RANK",
    "RANGE_BUCKETS",
    "match_detections",
    "pooled_pr",
    "average_precision",
    "range_bucketed_ap",
    "evaluate",
    "metrics_to_json",
]

DEFAULT_IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}

DIFFICULTY_RANK = {"easy": 0, "moderate": 1, "hard": 2, "ignored": 3}

# planar-distance buckets, upper-inclusive: (0, 20], (20, 40], (40, inf)
RANGE_BUCKETS = (("0-20", 0.0, 20.0), ("20-40", 20.0, 40.0), ("40-inf", 40.0, math.inf))


@dataclass
class EvalConfig:
    """What to evaluate and how.

    iou_threshold None picks the class default (car 0.7, pedestrian and
    cyclist 0.5). recall_positions must be 11 or 40. kind selects the
    overlap measure. Ground truths whose difficulty ranks above the
    configured level are ignored: they do not count toward recall and a
    detection matching one is dropped from scoring instead of becoming
    a false positive.
    """

    class_name: str = "Car"
    iou_threshold: float | None = None
    recall_positions: int = 40
    kind: str = "3d"
    difficulty: str = "moderate"

    def resolved_threshold(self):
        if self.iou_threshold is not None:
            return float(self.iou_threshold)
        if self.class_name not in DEFAULT_IOU_THRESHOLDS:
            raise ValueError(f"no default IoU threshold for class {self.class_name}")
        return DEFAULT_IOU_THRESHOLDS[self.class_name]

    def validate(self):
        thr = self.resolved_threshold()
        if not 0.0 < thr <= 1.0:
            raise ValueError(f"iou_threshold {thr} outside (0, 1]")
        if self.recall_positions not in (11, 40):
            raise ValueError(f"recall_positions must be 11 or 40, got {self.recall_positions}")
        if self.kind not in ("3d", "bev"):
            raise ValueError(f"kind must be '3d' or 'bev', got {self.kind}")
        if self.difficulty not in DIFFICULTY_RANK or self.difficulty == "ignored":
            raise ValueError(f"difficulty must be easy/moderate/hard, got {self.difficulty}")


def recall_samples(positions):
    """The fixed recall grid: {0, 0.1, ..., 1} or {1/40, 2/40, ..., 1}."""
    if positions == 11:
        return np.arange(11) / 10.0
    if positions == 40:
        return np.arange(1, 41) / 40.0
    raise ValueError(f"recall positions must be 11 or 40, got {positions}")


def match_detections(dets, gts, cfg):
    """Greedily match one scene's detections against its ground truth.

    Detections of the configured class are visited in descending score
    order (ties keep input order). Each one takes the highest-IoU still
    unmatched counted ground truth at or above the threshold; failing
    that it may match an ignored ground truth (and then drops out of
    scoring); otherwise it is a false positive.

    Args:
        dets: list of DetectionRecord
        gts: list of (cls, Box7, difficulty)
        cfg: EvalConfig
    Returns:
        dict with det_indices (into dets, the evaluated subset in visit
        order), flags (1 TP, 0 FP, -1 ignored), matched_gt (gt index or
        -1), gt_counted (per-gt bool), gt_matched (per-gt bool)
    """
    thr = cfg.resolved_threshold()
    level = DIFFICULTY_RANK[cfg.difficulty]
    cls_gt = [i for i, (cls, _, _) in enumerate(gts) if cls == cfg.class_name]
    counted = np.zeros(len(gts), dtype=bool)
    for i in cls_gt:
        counted[i] = DIFFICULTY_RANK[gts[i][2]] <= level
    det_idx = [i for i, d in enumerate(dets) if d.label == cfg.class_name]
    det_idx.sort(key=lambda i: -dets[i].score)

    gt_boxes = np.stack([gts[i][1].as_array() for i in cls_gt]) if cls_gt else np.zeros((0, 7))
    taken = np.zeros(len(cls_gt), dtype=bool)
    flags = np.empty(len(det_idx), dtype=np.int64)
    matched = np.full(len(det_idx), -1, dtype=np.int64)
    gt_matched = np.zeros(len(gts), dtype=bool)
    for k, di in enumerate(det_idx):
        if not cls_gt:
            flags[k] = 0
            continue
        ious = iou_one_to_many(dets[di].box.as_array(), gt_boxes, kind=cfg.kind)
        best = -1
        best_iou = thr
        best_ignored = -1
        best_ignored_iou = thr
        for j, gi in enumerate(cls_gt):
            if taken[j] or ious[j] < thr:
                continue
            if counted[gi]:
                if ious[j] > best_iou or best < 0:
                    best, best_iou = j, ious[j]
            elif ious[j] > best_ignored_iou or best_ignored < 0:
                best_ignored, best_ignored_iou = j, ious[j]
        if best >= 0:
            taken[best] = True
            gt_matched[cls_gt[best]] = True
            flags[k] = 1
            matched[k] = cls_gt[best]
        elif best_ignored >= 0:
            taken[best_ignored] = True
            gt_matched[cls_gt[best_ignored]] = True
            flags[k] = -1
            matched[k] = cls_gt[best_ignored]
        else:
            flags[k] = 0
    return {
        "det_indices": np.array(det_idx, dtype=np.int64),
        "flags": flags,
        "matched_gt": matched,
        "gt_counted": counted,
        "gt_matched": gt_matched,
    }


def pooled_pr(scene_dets, scene_gts, cfg):
    """Match every scene and pool the scored flags.

    Args:
        scene_dets: list (per scene) of DetectionRecord lists
        scene_gts: list (per scene) of gt lists
        cfg: EvalConfig
    Returns:
        (scores (D,), flags (D,), n_gt) with ignored detections already
        removed; scores sorted descending with a deterministic
        (scene, rank) tiebreak
    """
    scores = []
    flags = []
    n_gt = 0
    for dets, gts in zip(scene_dets, scene_gts):
        m = match_detections(dets, gts, cfg)
        n_gt += int(m["gt_counted"].sum())
        keep = m["flags"] >= 0
        scores.extend(dets[i].score for i in m["det_indices"][keep])
        flags.extend(int(f) for f in m["flags"][keep])
    scores = np.array(scores, dtype=np.float64)
    flags = np.array(flags, dtype=np.int64)
    order = np.lexsort((np.arange(scores.size), -scores))
    return scores[order], flags[order], n_gt


def _ap_from_flags(flags, n_gt, positions):
    """AP percentage from pooled descending-score TP/FP flags."""
    if n_gt == 0:
        return None
    samples = recall_samples(positions)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags == 1)
    fp = np.cumsum(flags == 0)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    ap = 0.0
    for r in samples:
        mask = recall >= r
        ap += float(precision[mask].max()) if mask.any() else 0.0
    return ap / samples.size * 100.0


def average_precision(scene_dets, scene_gts, cfg):
    """Corpus AP percentage, or None when there are no counted gts."""
    cfg.validate()
    _, flags, n_gt = pooled_pr(scene_dets, scene_gts, cfg)
    return _ap_from_flags(flags, n_gt, cfg.recall_positions)


def _planar(box):
    return math.hypot(box.cx, box.cy)


def _bucket_of(dist):
    for name, lo, hi in RANGE_BUCKETS:
        if lo < dist <= hi:
            return name
    return RANGE_BUCKETS[0][0]  # dist == 0 joins the nearest bucket


def range_bucketed_ap(scene_dets, scene_gts, cfg):
    """AP per planar-distance bucket plus the bucket mean.

    Matching runs once per scene; each counted gt belongs to the bucket
    of its own center. For the headline number a detection follows its
    matched gt's bucket and an unmatched one its own center; the
    alternative count assigns every detection by its own center. Empty
    buckets (no gts) are reported absent and excluded from the mean.

    Returns:
        dict bucket name -> {"ap", "ap_center_assigned", "n_gt"} plus
        "mean" (None when every bucket is absent)
    """
    cfg.validate()
    per_bucket = {name: {"scores": [], "flags": [], "scores_center": [], "flags_center": [], "n_gt": 0}
                  for name, _, _ in RANGE_BUCKETS}
    for dets, gts in zip(scene_dets, scene_gts):
        m = match_detections(dets, gts, cfg)
        gt_bucket = [_bucket_of(_planar(b)) for _, b, _ in gts]
        for gi in np.flatnonzero(m["gt_counted"]):
            per_bucket[gt_bucket[gi]]["n_gt"] += 1
        for k, di in enumerate(m["det_indices"]):
            flag = int(m["flags"][k])
            if flag < 0:
                continue
            own = _bucket_of(_planar(dets[di].box))
            headline = gt_bucket[m["matched_gt"][k]] if flag == 1 else own
            per_bucket[headline]["scores"].append(dets[di].score)
            per_bucket[headline]["flags"].append(flag)
            per_bucket[own]["scores_center"].append(dets[di].score)
            per_bucket[own]["flags_center"].append(flag)
    out = {}
    present = []
    for name, _, _ in RANGE_BUCKETS:
        b = per_bucket[name]
        if b["n_gt"] == 0:
            out[name] = None
            continue
        def ap_of(scores, flags):
            scores = np.array(scores, dtype=np.float64)
            flags = np.array(flags, dtype=np.int64)
            order = np.lexsort((np.arange(scores.size), -scores))
            return _ap_from_flags(flags[order], b["n_gt"], cfg.recall_positions)
        ap = ap_of(b["scores"], b["flags"])
        out[name] = {
            "ap": ap,
            "ap_center_assigned": ap_of(b["scores_center"], b["flags_center"]),
            "n_gt": b["n_gt"],
        }
        present.append(ap)
    out["mean"] = float(np.mean(present)) if present else None
    return out


def evaluate(scene_dets, scene_gts, cfg):
    """Full evaluation: corpus AP plus distance buckets."""
    cfg.validate()
    return {
        "class": cfg.class_name,
        "metric": cfg.kind,
        "difficulty": cfg.difficulty,
        "recall_positions": cfg.recall_positions,
        "iou_threshold": cfg.resolved_threshold(),
        "ap": average_precision(scene_dets, scene_gts, cfg),
        "per_bucket": range_bucketed_ap(scene_dets, scene_gts, cfg),
    }


def metrics_to_json(result):
    """Serialize an evaluate() result deterministically."""
    return json.dumps(result, indent=2, separators=(",", ": "), sort_keys=False) + "\n"
