"""Anchors, box coding, detection losses, NMS, and the two-stage pipeline.

The first stage scores yaw-aligned anchors tiled over the bird's-eye
grid and regresses box residuals; survivors of a BEV NMS move to the
second stage, where each proposal is completed into a dense shape,
pooled against keypoint features, fused under attention, and refined by
small MLP heads. Losses follow the two-stage split

    L = L_rpn + L_rcnn,        L_rpn = L_box + L_pt + L_aux,
    L_aux = L_seg + L_offset,

with a focal term for foreground classification, binary cross entropy
for the in-box offset maps, smooth-L1 with a sine-encoded heading (plus
a direction classifier) for box regression, and an IoU-guided quality
target for the second-stage confidence.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Box7, iou_one_to_many, normalize_angle, points_in_box
from .pointops import (
    GridPoolConfig,
    GridPoolParams,
    KeypointAttention,
    MsgConfig,
    MsgParams,
    VsaParams,
    msg_extract,
    reweight_keypoints,
    roi_aware_pool,
    roi_grid_pool,
    sample_keypoints,
    three_nn_interpolate,
    vsa_aggregate,
)
from .sie import FusionState, ShapePredictor, fuse_attention, predict_shape
from .voxel import GridSpec, SparseConvBackbone, voxel_centers, voxelize

__all__ = [
    "DetectionRecord",
    "AnchorConfig",
    "generate_anchors",
    "encode_box",
    "decode_box",
    "aux_targets",
    "focal_loss",
    "offset_bce_loss",
    "bce_loss",
    "box_regression_loss",
    "SampledProposals",
    "sample_proposals",
    "nms",
    "total_loss",
    "PipelineConfig",
    "DetectorParams",
    "generate_proposals",
    "inference_pipeline",
    "detections_to_json",
    "detections_from_json",
]


@dataclass
class DetectionRecord:
    """One scored detection: class label, box, and a (0, 1) confidence."""

    label: str
    box: Box7
    score: float


# ============================ anchors & coding ============================


@dataclass
class AnchorConfig:
    """One anchor size per cell at a fixed height, rotated to each listed yaw."""

    size: tuple = (3.9, 1.6, 1.56)  # l, w, h
    yaws: tuple = (0.0, math.pi / 2.0)
    z_center: float = -1.0
    bev_stride: int = 8


def generate_anchors(grid, cfg):
    """Tile anchors over the strided BEV grid.

    One anchor per (cell, yaw) at the cell center, ordered row-major over
    (y, x) then by yaw index.

    Args:
        grid: GridSpec of the stride-1 voxel grid
        cfg: AnchorConfig
    Returns:
        (n_cells * n_yaws, 7) float64 boxes
    """
    nx, ny, _ = grid.dims_xyz
    sx = nx // cfg.bev_stride
    sy = ny // cfg.bev_stride
    vx = grid.voxel_size[0] * cfg.bev_stride
    vy = grid.voxel_size[1] * cfg.bev_stride
    xs = grid.range_min[0] + (np.arange(sx) + 0.5) * vx
    ys = grid.range_min[1] + (np.arange(sy) + 0.5) * vy
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    n = sx * sy
    l, w, h = cfg.size
    out = np.empty((n * len(cfg.yaws), 7))
    for i, yaw in enumerate(cfg.yaws):
        blk = out[i::len(cfg.yaws)]
        blk[:, 0] = xx.reshape(-1)
        blk[:, 1] = yy.reshape(-1)
        blk[:, 2] = cfg.z_center
        blk[:, 3:6] = (l, w, h)
        blk[:, 6] = yaw
    return out


def _diag(boxes):
    return np.sqrt(boxes[:, 3] ** 2 + boxes[:, 4] ** 2)


def encode_box(gt, anchors):
    """Residuals of ground-truth boxes relative to anchors.

    Centers are normalized by the anchor BEV diagonal (z by the anchor
    height), sizes are log ratios, and the heading slot is the wrapped
    yaw difference.

    Args:
        gt: (N, 7) boxes
        anchors: (N, 7) boxes
    Returns:
        (N, 7) residuals [dx, dy, dz, dl, dw, dh, dyaw]
    """
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    d = _diag(anchors)
    out = np.empty_like(gt)
    out[:, 0] = (gt[:, 0] - anchors[:, 0]) / d
    out[:, 1] = (gt[:, 1] - anchors[:, 1]) / d
    out[:, 2] = (gt[:, 2] - anchors[:, 2]) / anchors[:, 5]
    out[:, 3:6] = np.log(gt[:, 3:6] / anchors[:, 3:6])
    wrapped = np.mod(gt[:, 6] - anchors[:, 6] + np.pi, 2.0 * np.pi)
    wrapped = np.where(wrapped <= 0.0, wrapped + 2.0 * np.pi, wrapped)
    out[:, 6] = wrapped - np.pi
    return out


def decode_box(residuals, anchors):
    """Inverse of encode_box; yaw is renormalized to (-pi, pi]."""
    res = np.asarray(residuals, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    d = _diag(anchors)
    out = np.empty_like(res)
    out[:, 0] = res[:, 0] * d + anchors[:, 0]
    out[:, 1] = res[:, 1] * d + anchors[:, 1]
    out[:, 2] = res[:, 2] * anchors[:, 5] + anchors[:, 2]
    out[:, 3:6] = np.exp(res[:, 3:6]) * anchors[:, 3:6]
    yaw = res[:, 6] + anchors[:, 6]
    wrapped = np.mod(yaw + np.pi, 2.0 * np.pi)
    wrapped = np.where(wrapped <= 0.0, wrapped + 2.0 * np.pi, wrapped)
    out[:, 6] = wrapped - np.pi
    return out


# ============================ targets ============================


def aux_targets(points, gt_boxes):
    """Segmentation and offset targets for the auxiliary point supervision.

    A point is foreground when it falls inside any box (boundary
    inclusive; the lowest-index containing box wins). Its offset target
    is (box_center - point + diag/2) / diag per axis, with diag the box's
    main diagonal length, so in-box targets always land in [0, 1]; the
    box center maps to (0.5, 0.5, 0.5). Background rows stay zero.

    Args:
        points: (N, 3)
        gt_boxes: list of Box7
    Returns:
        (labels (N,) bool, offsets (N, 3) float64)
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    labels = np.zeros(n, dtype=bool)
    offsets = np.zeros((n, 3))
    for box in gt_boxes:
        inside = points_in_box(pts, box) & ~labels
        if not inside.any():
            continue
        labels |= inside
        diag = math.sqrt(box.l ** 2 + box.w ** 2 + box.h ** 2)
        center = np.array([box.cx, box.cy, box.cz])
        raw = (center - pts[inside] + 0.5 * diag) / diag
        offsets[inside] = np.clip(raw, 0.0, 1.0)
    return labels, offsets


def keypoint_targets(keypoint_xyz, gt_boxes):
    """Foreground mask for keypoints: inside any ground-truth box."""
    labels, _ = aux_targets(keypoint_xyz, gt_boxes)
    return labels


# ============================ losses ============================


def focal_loss(p_t, alpha_t=0.25, gamma=2.0, reduction="mean"):
    """Focal penalty -alpha_t * (1 - p_t)**gamma * ln(p_t).

    p_t is the probability assigned to the true class (and alpha_t its
    class weight), so a perfect prediction costs zero. Probabilities at
    or below zero are clamped to 1e-12 with a warning.

    Args:
        p_t: Tensor or ndarray of true-class probabilities
        alpha_t: scalar or array broadcastable over p_t
        gamma: focusing exponent
        reduction: "mean", "sum", or "none"
    Returns:
        Tensor (scalar unless reduction == "none")
    """
    t = ad.as_tensor(p_t)
    if (t.data <= 0.0).any():
        warnings.warn("focal_loss: clamping non-positive probabilities to 1e-12")
        t = ad.clamp_min(t, 1e-12)
    elif (t.data < 1e-12).any():
        t = ad.clamp_min(t, 1e-12)
    one_minus = ad.add_const(ad.neg(t), 1.0)
    per = ad.neg(ad.mul(ad.power(one_minus, gamma), ad.log(t)))
    if np.ndim(alpha_t) == 0:
        per = ad.scale(per, float(alpha_t))
    else:
        per = ad.mul(per, ad.as_tensor(np.broadcast_to(np.asarray(alpha_t, dtype=np.float64), per.data.shape)))
    if reduction == "mean":
        return ad.tmean(per)
    if reduction == "sum":
        return ad.tsum(per)
    return per


def bce_loss(pred, target, reduction="mean", eps=1e-12):
    """Binary cross entropy -t*ln(p) - (1-t)*ln(1-p) on probabilities."""
    p = ad.as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    p = ad.clamp_min(p, eps)
    q = ad.clamp_min(ad.add_const(ad.neg(p), 1.0), eps)
    tt = Tensor(np.broadcast_to(t, p.data.shape).copy())
    one_minus_t = Tensor(1.0 - tt.data)
    per = ad.neg(ad.add(ad.mul(tt, ad.log(p)), ad.mul(one_minus_t, ad.log(q))))
    if reduction == "mean":
        return ad.tmean(per)
    if reduction == "sum":
        return ad.tsum(per)
    return per


def offset_bce_loss(pred_offsets, target_offsets, fg_mask):
    """Mean BCE of the in-box offset maps over foreground rows.

    Args:
        pred_offsets: (N, 3) Tensor of (0, 1) predictions
        target_offsets: (N, 3) targets in [0, 1]
        fg_mask: (N,) bool; rows outside it are excluded
    Returns:
        scalar Tensor (zero when no foreground)
    """
    fg = np.flatnonzero(np.asarray(fg_mask, dtype=bool))
    if fg.size == 0:
        return Tensor(np.array(0.0))
    pred = ad.take_rows(ad.as_tensor(pred_offsets), fg)
    tgt = np.asarray(target_offsets, dtype=np.float64)[fg]
    return bce_loss(pred, tgt, reduction="mean")


def box_regression_loss(pred_residuals, target_residuals, dir_logits=None, dir_targets=None):
    """Smooth-L1 box regression with sine-encoded heading.

    The six center/size slots penalize the raw residual difference; the
    heading slot penalizes sin(pred - target), which keeps boxes that
    differ by pi cheap and delegates the flip to the direction
    classifier (BCE on dir_logits when given).

    Args:
        pred_residuals: (N, 7) Tensor
        target_residuals: (N, 7) ndarray
        dir_logits: optional (N,) Tensor
        dir_targets: optional (N,) 0/1 array
    Returns:
        scalar Tensor
    """
    pred = ad.as_tensor(pred_residuals)
    tgt = np.asarray(target_residuals, dtype=np.float64)
    diff = ad.sub(pred, Tensor(tgt))
    n = pred.data.shape[0]
    sel = np.arange(n * 7).reshape(n, 7)
    flat = ad.reshape(diff, (n * 7,))
    lin = ad.take_rows(flat, sel[:, :6].reshape(-1))
    yaw = ad.take_rows(flat, sel[:, 6])
    loss = ad.tmean(ad.smooth_l1(lin))
    loss = ad.add(loss, ad.tmean(ad.smooth_l1(ad.tsin(yaw))))
    if dir_logits is not None:
        loss = ad.add(loss, bce_loss(ad.sigmoid(ad.as_tensor(dir_logits)), dir_targets))
    return loss


def total_loss(outputs, targets):
    """Combine all detection loss terms.

    Args:
        outputs: dict of Tensors:
            rpn_residuals (P, 7), rpn_dir_logits (P,),
            keypoint_fg_probs (K,), aux_fg_probs (A,), aux_offsets (A, 3),
            rcnn_residuals (S, 7), rcnn_conf_probs (S,)
        targets: dict of arrays:
            rpn_residual_targets (P, 7), rpn_dir_targets (P,),
            keypoint_fg_targets (K,), aux_fg_targets (A,),
            aux_offset_targets (A, 3), rcnn_residual_targets (S, 7),
            rcnn_conf_targets (S,)
    Returns:
        (total Tensor, {"box","pt","seg","offset","rpn","rcnn","total"} floats)

    Raises:
        ValueError when any component comes out non-finite, naming it.
    """
    def fg_probs(probs, labels):
        lab = np.asarray(labels, dtype=np.float64)
        p = ad.as_tensor(probs)
        # p_t = p for foreground, 1 - p for background
        sign = Tensor(2.0 * lab - 1.0)
        base = Tensor(1.0 - lab)
        return ad.add(ad.mul(p, sign), base)

    l_box = box_regression_loss(
        outputs["rpn_residuals"], targets["rpn_residual_targets"],
        outputs.get("rpn_dir_logits"), targets.get("rpn_dir_targets"),
    )
    kp_lab = np.asarray(targets["keypoint_fg_targets"], dtype=np.float64)
    l_pt = focal_loss(fg_probs(outputs["keypoint_fg_probs"], kp_lab),
                      alpha_t=np.where(kp_lab > 0.5, 0.25, 0.75))
    aux_lab = np.asarray(targets["aux_fg_targets"], dtype=np.float64)
    l_seg = focal_loss(fg_probs(outputs["aux_fg_probs"], aux_lab),
                       alpha_t=np.where(aux_lab > 0.5, 0.25, 0.75))
    l_offset = offset_bce_loss(outputs["aux_offsets"], targets["aux_offset_targets"],
                               aux_lab > 0.5)
    l_rcnn_box = box_regression_loss(outputs["rcnn_residuals"], targets["rcnn_residual_targets"])
    l_rcnn_conf = bce_loss(outputs["rcnn_conf_probs"], targets["rcnn_conf_targets"])
    l_rcnn = ad.add(l_rcnn_box, l_rcnn_conf)

    terms = {}
    for name, t in (("box", l_box), ("pt", l_pt), ("seg", l_seg),
                    ("offset", l_offset), ("rcnn", l_rcnn)):
        v = float(t.data)
        if not np.isfinite(v):
            raise ValueError(f"total_loss: component {name} is non-finite")
        terms[name] = v
    l_aux = ad.add(l_seg, l_offset)
    l_rpn = ad.add(ad.add(l_box, l_pt), l_aux)
    total = ad.add(l_rpn, l_rcnn)
    terms["aux"] = float(l_aux.data)
    terms["rpn"] = float(l_rpn.data)
    terms["total"] = float(total.data)
    return total, terms


# ============================ proposal sampling ============================


@dataclass
class SampledProposals:
    indices: np.ndarray  # (n,) into the proposal list
    labels: np.ndarray  # (n,) bool, True = positive
    matched_gt: np.ndarray  # (n,) gt index for positives, -1 otherwise


def sample_proposals(proposal_boxes, gt_boxes, rng, n_samples=128, max_positive=64,
                     positive_iou=0.55):
    """Draw the second-stage training set from scored proposals.

    A proposal is positive when its best 3-D IoU against any ground truth
    reaches positive_iou. Up to max_positive positives are drawn without
    replacement; negatives fill the remainder. When one side runs dry the
    other backfills, and nothing is ever duplicated, so fewer than
    n_samples come back only if the pool itself is smaller.

    Args:
        proposal_boxes: (N, 7)
        gt_boxes: (M, 7)
        rng: numpy Generator
    Returns:
        SampledProposals; indices are sorted ascending for determinism
    """
    props = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 7)
    gts = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 7)
    n = props.shape[0]
    best_iou = np.zeros(n)
    best_gt = np.full(n, -1, dtype=np.int64)
    for j in range(gts.shape[0]):
        ious = iou_one_to_many(gts[j], props, kind="3d")
        better = ious > best_iou
        best_iou[better] = ious[better]
        best_gt[better] = j
    pos_pool = np.flatnonzero(best_iou >= positive_iou)
    neg_pool = np.flatnonzero(best_iou < positive_iou)
    n_pos = min(pos_pool.size, max_positive)
    pos_sel = rng.permutation(pos_pool)[:n_pos] if pos_pool.size else np.empty(0, np.int64)
    n_neg = min(neg_pool.size, n_samples - n_pos)
    neg_sel = rng.permutation(neg_pool)[:n_neg] if neg_pool.size else np.empty(0, np.int64)
    short = n_samples - n_pos - n_neg
    if short > 0 and pos_pool.size > n_pos:
        extra = np.setdiff1d(pos_pool, pos_sel, assume_unique=True)
        extra = rng.permutation(extra)[:short]
        pos_sel = np.concatenate([pos_sel, extra])
    idx = np.sort(np.concatenate([pos_sel, neg_sel]).astype(np.int64))
    labels = best_iou[idx] >= positive_iou
    matched = np.where(labels, best_gt[idx], -1)
    return SampledProposals(indices=idx, labels=labels, matched_gt=matched)


# ============================ NMS ============================


def nms(records, iou_threshold, kind="bev"):
    """Greedy non-maximum suppression over detection records.

    Records are visited in descending score order (ties keep the lower
    original index first); each survivor suppresses every remaining box
    whose IoU with it strictly exceeds the threshold.

    Args:
        records: list of DetectionRecord
        iou_threshold: suppression cutoff
        kind: "bev" or "3d"
    Returns:
        surviving records, descending score order
    """
    if not records:
        return []
    boxes = np.stack([r.box.as_array() for r in records])
    scores = np.array([r.score for r in records])
    order = np.lexsort((np.arange(len(records)), -scores))
    alive = np.ones(len(records), dtype=bool)
    keep = []
    for oi in order:
        if not alive[oi]:
            continue
        keep.append(oi)
        alive[oi] = False
        cand = np.flatnonzero(alive)
        if cand.size == 0:
            break
        ious = iou_one_to_many(boxes[oi], boxes[cand], kind=kind)
        alive[cand[ious > iou_threshold]] = False
    return [records[i] for i in keep]


# ============================ pipeline ============================


@dataclass
class PipelineConfig:
    """Stage thresholds and caps for inference."""

    pre_nms_top: int = 512
    rpn_nms_iou: float = 0.7
    rpn_nms_kind: str = "bev"
    post_nms_top: int = 100
    final_nms_iou: float = 0.01
    final_nms_kind: str = "3d"
    n_keypoints: int = 2048
    pool_resolution: int = 12
    label: str = "Car"


@dataclass
class DetectorParams:
    """Every weight the pipeline needs, bundled and seeded once."""

    grid: GridSpec
    backbone: SparseConvBackbone
    rpn_head: ad.LinearLayer
    aux_seg_head: ad.LinearLayer
    aux_offset_head: ad.LinearLayer
    keypoint_head: ad.LinearLayer
    vsa: VsaParams
    attention: KeypointAttention
    msg_cfg: MsgConfig
    msg: MsgParams
    grid_pool_cfg: GridPoolConfig
    grid_pool: GridPoolParams
    fusion: FusionState
    shape_net: ShapePredictor
    refine_l1: ad.LinearLayer
    refine_l2: ad.LinearLayer
    refine_out: ad.LinearLayer
    conf_l1: ad.LinearLayer
    conf_l2: ad.LinearLayer
    conf_out: ad.LinearLayer
    anchor_cfg: AnchorConfig
    pipeline_cfg: PipelineConfig

    @classmethod
    def create(cls, grid=None, seed=0, pipeline_cfg=None, anchor_cfg=None, shape_net=None):
        grid = grid or GridSpec()
        pipeline_cfg = pipeline_cfg or PipelineConfig()
        anchor_cfg = anchor_cfg or AnchorConfig()
        rng = np.random.default_rng(seed)
        backbone = SparseConvBackbone(grid, in_channels=4, rng=rng)
        chans = backbone.channel_plan
        n_yaws = len(anchor_cfg.yaws)
        aux_in = sum(chans[1:])  # levels 2-4 interpolated onto raw points
        kp_channels = 32 * len(chans)
        msg_cfg = MsgConfig()
        grid_pool_cfg = GridPoolConfig()
        n_grid = grid_pool_cfg.grid_size ** 3
        fused = msg_cfg.channels + grid_pool_cfg.channels
        if shape_net is None:
            shape_net = ShapePredictor.create(rng)
        return cls(
            grid=grid,
            backbone=backbone,
            rpn_head=ad.linear_layer_init(chans[-1], n_yaws * 9, rng),
            aux_seg_head=ad.linear_layer_init(aux_in, 1, rng),
            aux_offset_head=ad.linear_layer_init(aux_in, 3, rng),
            keypoint_head=ad.linear_layer_init(kp_channels, 1, rng),
            vsa=VsaParams.create(chans, rng),
            attention=KeypointAttention.create(kp_channels, rng),
            msg_cfg=msg_cfg,
            msg=MsgParams.create(msg_cfg, rng),
            grid_pool_cfg=grid_pool_cfg,
            grid_pool=GridPoolParams.create(grid_pool_cfg, kp_channels, rng),
            fusion=FusionState.create(n_grid, fused, rng),
            shape_net=shape_net,
            refine_l1=ad.linear_layer_init(n_grid * fused, 256, rng),
            refine_l2=ad.linear_layer_init(256, 256, rng),
            refine_out=ad.linear_layer_init(256, 7, rng, weight_scale=0.001),
            conf_l1=ad.linear_layer_init(n_grid * fused, 256, rng),
            conf_l2=ad.linear_layer_init(256, 256, rng),
            conf_out=ad.linear_layer_init(256, 1, rng, weight_scale=0.01),
            anchor_cfg=anchor_cfg,
            pipeline_cfg=pipeline_cfg,
        )


def _np_linear(x, layer):
    return x @ layer.weight.data.T + layer.bias.data


def _bev_feature_map(level, grid, stride):
    """Scatter-max the deepest sparse features onto a dense (sy, sx, C) map."""
    nx, ny, _ = grid.dims_xyz
    sx, sy = nx // stride, ny // stride
    feats = np.zeros((sy, sx, level.features.shape[1]))
    ys = level.coords[:, 1]
    xs = level.coords[:, 2]
    ok = (ys < sy) & (xs < sx)
    np.maximum.at(feats, (ys[ok], xs[ok]), level.features[ok])
    return feats


def generate_proposals(points, params):
    """First-stage proposals: backbone, BEV head, residual decoding.

    Returns (boxes (N, 7), scores (N,), levels) with N capped at
    pre_nms_top by descending score; levels carries the backbone feature
    pyramid for reuse downstream.
    """
    tensor = voxelize(points, params.grid)
    if tensor.n_active == 0:
        return np.zeros((0, 7)), np.zeros(0), []
    levels = params.backbone.forward(tensor)
    top, stride = levels[-1]
    bev = _bev_feature_map(top, params.grid, stride)
    raw = _np_linear(bev.reshape(-1, bev.shape[2]), params.rpn_head)
    n_yaws = len(params.anchor_cfg.yaws)
    raw = raw.reshape(-1, n_yaws, 9)
    anchors = generate_anchors(params.grid, params.anchor_cfg).reshape(-1, n_yaws, 7)
    if anchors.shape[0] != raw.shape[0]:
        raise RuntimeError("generate_proposals: anchor map and BEV map disagree")
    logits = raw[:, :, 0].reshape(-1)
    residuals = raw[:, :, 1:8].reshape(-1, 7)
    scores = 1.0 / (1.0 + np.exp(-logits))
    boxes = decode_box(residuals, anchors.reshape(-1, 7))
    k = min(params.pipeline_cfg.pre_nms_top, scores.size)
    order = np.lexsort((np.arange(scores.size), -scores))[:k]
    return boxes[order], scores[order], levels


def _keypoint_features(points, levels, params):
    """FPS keypoints, multi-level aggregation, and attention reweighting."""
    _, kp_xyz = sample_keypoints(points, params.pipeline_cfg.n_keypoints)
    level_data = [
        (voxel_centers(t.coords, params.grid, s), t.features) for t, s in levels
    ]
    feats = vsa_aggregate(kp_xyz, level_data, params.vsa)
    feats, _ = reweight_keypoints(feats, params.attention)
    return kp_xyz, feats


def refine_proposal(box, scene_points, kp_xyz, kp_feats, params):
    """Second-stage refinement of one proposal box.

    Pools in-box points to a canonical grid, completes them into a dense
    shape, summarizes its structure, pools keypoint features at the
    box's grid points, fuses both under attention, and regresses a
    residual plus a confidence from the flattened fused features.

    Returns:
        (refined Box7, confidence float)
    """
    grid = roi_aware_pool(scene_points, box, params.pipeline_cfg.pool_resolution)
    shape = predict_shape(grid, params.shape_net)
    structure = msg_extract(shape.points, params.msg_cfg, params.msg)
    pooled = roi_grid_pool(box, kp_xyz, kp_feats, params.grid_pool_cfg, params.grid_pool)
    fused = fuse_attention(pooled.features, structure, params.fusion).data
    flat = fused.reshape(-1)
    h = np.maximum(_np_linear(flat[None, :], params.refine_l1), 0.0)
    h = np.maximum(_np_linear(h, params.refine_l2), 0.0)
    residual = _np_linear(h, params.refine_out)[0]
    c = np.maximum(_np_linear(flat[None, :], params.conf_l1), 0.0)
    c = np.maximum(_np_linear(c, params.conf_l2), 0.0)
    logit = float(_np_linear(c, params.conf_out)[0, 0])
    refined = decode_box(residual[None, :], box.as_array()[None, :])[0]
    score = 1.0 / (1.0 + math.exp(-logit))
    return Box7.from_array(refined), score


def inference_pipeline(points, params, proposals=None, return_stages=False):
    """Run the full two-stage pipeline on one scene.

    Stage one produces scored proposals (or accepts externally supplied
    ones through `proposals` as an (boxes (N, 7), scores (N,)) pair,
    which is how oracle scores are injected in tests). Proposals pass a
    BEV NMS and a top-k cap, each survivor is refined through the shape
    completion stage, and a final strict NMS yields the detections.

    Args:
        points: (N, >=3) scene points (extra columns feed voxel features)
        params: DetectorParams
        proposals: optional (boxes, scores) bypassing the first stage
        return_stages: also return {"n_proposals", "n_stage1"} counts
    Returns:
        list of DetectionRecord, descending score; with return_stages a
        (records, counts) tuple
    """
    pts = np.asarray(points, dtype=np.float64)
    counts = {"n_proposals": 0, "n_stage1": 0}

    def done(records):
        return (records, counts) if return_stages else records

    if pts.ndim != 2 or pts.shape[0] == 0:
        return done([])
    if pts.shape[1] == 3:
        pts = np.concatenate([pts, np.zeros((pts.shape[0], 1))], axis=1)
    cfg = params.pipeline_cfg
    if proposals is None:
        boxes, scores, levels = generate_proposals(pts, params)
    else:
        boxes, scores = proposals
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        tensor = voxelize(pts, params.grid)
        levels = params.backbone.forward(tensor) if tensor.n_active else []
    counts["n_proposals"] = int(boxes.shape[0])
    if boxes.shape[0] == 0 or not levels:
        return done([])
    records = [DetectionRecord(cfg.label, Box7.from_array(b), float(s))
               for b, s in zip(boxes, scores)]
    stage1 = nms(records, cfg.rpn_nms_iou, kind=cfg.rpn_nms_kind)[: cfg.post_nms_top]
    counts["n_stage1"] = len(stage1)
    if not stage1:
        return done([])
    kp_xyz, kp_feats = _keypoint_features(pts, levels, params)
    refined = []
    for rec in stage1:
        box, score = refine_proposal(rec.box, pts[:, :3], kp_xyz, kp_feats, params)
        refined.append(DetectionRecord(cfg.label, box, score))
    return done(nms(refined, cfg.final_nms_iou, kind=cfg.final_nms_kind))


# ============================ detection JSON ============================


def detections_to_json(scene_id, records):
    """Serialize detections deterministically (stable field and record order)."""
    payload = {
        "scene": str(scene_id),
        "detections": [
            {
                "label": r.label,
                "box": [float(v) for v in r.box.as_array()],
                "score": float(r.score),
            }
            for r in records
        ],
    }
    return json.dumps(payload, indent=2, separators=(",", ": ")) + "\n"


def detections_from_json(text):
    """Parse detections_to_json output back into (scene_id, records)."""
    payload = json.loads(text)
    records = [
        DetectionRecord(d["label"], Box7.from_array(np.array(d["box"])), float(d["score"]))
        for d in payload["detections"]
    ]
    return payload["scene"], records
