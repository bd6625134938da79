"""Command-line front end.

One subcommand per library entry point: make-corpus, voxelize,
shape-train, shape-predict, eval, pipeline, bench. Every command reads
an optional JSON config (strictly validated: unknown keys are rejected
by name), logs to stderr, and writes deterministic JSON to files or
stdout so reruns with the same config and seed are byte-identical.

Exit codes: 0 success, 1 usage error (bad flags, bad config, missing
inputs), 2 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from .detect import (
    AnchorConfig,
    DetectionRecord,
    DetectorParams,
    PipelineConfig,
    detections_to_json,
    inference_pipeline,
    nms,
)
from .geometry import Box7, iou3d, iou_one_to_many
from .kitti import Scene, augment, gt_sample, load_gt_database, read_velodyne
from .metrics import EvalConfig, evaluate, metrics_to_json
from .pointops import GridPoolConfig, MsgConfig, farthest_point_sample
from .sie import (
    ShapePredictor,
    ShapeTrainConfig,
    load_corpus,
    make_shape_corpus,
    predict_shape,
    save_corpus,
    shape_forward,
    train_shape_net,
)
from .container import read_point_sets, write_point_sets
from .voxel import GridSpec, build_rulebook_submanifold, dump_voxels_csv, sparse_conv_apply, voxelize

__all__ = ["main", "load_config", "DEFAULT_CONFIG", "UsageError"]


class UsageError(Exception):
    """Bad flags, bad config, or missing inputs; exits with code 1."""


# ============================ config ============================

# The full schema with defaults. Nested dicts validate recursively;
# unknown keys anywhere are usage errors naming the dotted key path.
DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "grid": {
        "range_min": [0.0, -40.0, -3.0],
        "range_max": [70.4, 40.0, 1.0],
        "voxel_size": [0.05, 0.05, 0.1],
    },
    "anchors": {
        "size": [3.9, 1.6, 1.56],
        "yaws": [0.0, math.pi / 2.0],
        "z_center": -1.0,
        "bev_stride": 8,
    },
    "pipeline": {
        "pre_nms_top": 512,
        "rpn_nms_iou": 0.7,
        "rpn_nms_kind": "bev",
        "post_nms_top": 100,
        "final_nms_iou": 0.01,
        "final_nms_kind": "3d",
        "n_keypoints": 2048,
        "pool_resolution": 12,
        "label": "Car",
    },
    "msg": {
        "n_centers": 128,
        "max_neighbors": 16,
        "radii": [0.2, 0.4],
        "channels": 128,
        "hidden": 64,
    },
    "grid_pool": {
        "grid_size": 6,
        "radii": [0.8, 1.6],
        "max_neighbors": 16,
        "channels": 128,
    },
    "shape_train": {
        "steps": 2000,
        "learning_rate": 1e-4,
        "decay_factor": 0.7,
        "decay_every": 50000,
        "batch_size": 4,
        "resolution": 4,
        "holdout_fraction": 0.21875,
    },
    "eval": {
        "class": "Car",
        "iou_threshold": None,
        "recall_positions": 40,
        "kind": "3d",
        "difficulty": "moderate",
    },
    "augment": {
        "enabled": False,
        "gt_db": None,
        "max_samples": 15,
    },
}


def _merge_validate(defaults, override, prefix=""):
    out = {}
    for key, dval in defaults.items():
        if key in override and isinstance(dval, dict):
            oval = override[key]
            if not isinstance(oval, dict):
                raise UsageError(f"config key {prefix}{key} must be an object")
            out[key] = _merge_validate(dval, oval, prefix=f"{prefix}{key}.")
        elif key in override:
            out[key] = override[key]
        else:
            out[key] = json.loads(json.dumps(dval)) if isinstance(dval, dict) else dval
    for key in override:
        if key not in defaults:
            raise UsageError(f"unknown config key: {prefix}{key}")
    return out


def load_config(path=None):
    """Read and validate a JSON config file merged over the defaults."""
    if path is None:
        return _merge_validate(DEFAULT_CONFIG, {})
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return _merge_validate(DEFAULT_CONFIG, data)


def _grid_from_config(cfg):
    g = cfg["grid"]
    return GridSpec(range_min=g["range_min"], range_max=g["range_max"], voxel_size=g["voxel_size"])


def _detector_from_config(cfg, seed):
    pl = cfg["pipeline"]
    return DetectorParams.create(
        grid=_grid_from_config(cfg),
        seed=seed,
        pipeline_cfg=PipelineConfig(
            pre_nms_top=pl["pre_nms_top"], rpn_nms_iou=pl["rpn_nms_iou"],
            rpn_nms_kind=pl["rpn_nms_kind"], post_nms_top=pl["post_nms_top"],
            final_nms_iou=pl["final_nms_iou"], final_nms_kind=pl["final_nms_kind"],
            n_keypoints=pl["n_keypoints"], pool_resolution=pl["pool_resolution"],
            label=pl["label"],
        ),
        anchor_cfg=AnchorConfig(
            size=tuple(cfg["anchors"]["size"]), yaws=tuple(cfg["anchors"]["yaws"]),
            z_center=cfg["anchors"]["z_center"], bev_stride=cfg["anchors"]["bev_stride"],
        ),
    )


def _limit_threads(n):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        print("note: threadpoolctl not installed, --threads ignored", file=sys.stderr)
        return None
    return threadpool_limits(limits=int(n))


def _log(msg):
    print(msg, file=sys.stderr)


def _emit(text, out_path):
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _dumps(payload):
    return json.dumps(payload, indent=2, separators=(",", ": ")) + "\n"


# ============================ subcommands ============================


def cmd_make_corpus(args, cfg):
    seed = args.seed if args.seed is not None else cfg["seed"]
    pairs = make_shape_corpus(args.count, seed=seed)
    save_corpus(args.out, pairs)
    _log(f"wrote {len(pairs)} (partial, complete) pairs to {args.out}")
    _emit(_dumps({
        "command": "make-corpus",
        "count": len(pairs),
        "seed": seed,
        "path": args.out,
        "sha256": hashlib.sha256(open(args.out, "rb").read()).hexdigest(),
    }), None)
    return 0


def cmd_voxelize(args, cfg):
    if not os.path.exists(args.points):
        raise UsageError(f"points file not found: {args.points}")
    grid = _grid_from_config(cfg)
    points = read_velodyne(args.points)
    tensor = voxelize(points, grid)
    dump_voxels_csv(args.out, tensor)
    _log(f"{points.shape[0]} points -> {tensor.n_active} voxels")
    _emit(_dumps({
        "command": "voxelize",
        "n_points": int(points.shape[0]),
        "n_voxels": int(tensor.n_active),
        "dims_zyx": list(tensor.dims_zyx),
        "out": args.out,
    }), None)
    return 0


def cmd_shape_train(args, cfg):
    if not os.path.exists(args.corpus):
        raise UsageError(f"corpus file not found: {args.corpus}")
    seed = args.seed if args.seed is not None else cfg["seed"]
    st = cfg["shape_train"]
    train_cfg = ShapeTrainConfig(
        steps=st["steps"], learning_rate=st["learning_rate"],
        decay_factor=st["decay_factor"], decay_every=st["decay_every"],
        batch_size=st["batch_size"], resolution=st["resolution"],
        holdout_fraction=st["holdout_fraction"], seed=seed,
    )
    if args.learning_rate is not None:
        train_cfg.learning_rate = args.learning_rate
    if args.steps is not None:
        train_cfg.steps = args.steps
    pairs = load_corpus(args.corpus)
    t0 = time.perf_counter()
    net, info = train_shape_net(pairs, train_cfg)
    _log(f"trained {train_cfg.steps} steps in {time.perf_counter() - t0:.1f}s, "
         f"holdout {info['holdout_before']:.6f} -> {info['holdout_after']:.6f}")
    ad.save_checkpoint(args.out, net.param_dict())
    curve = _dumps({
        "command": "shape-train",
        "steps": train_cfg.steps,
        "learning_rate": train_cfg.learning_rate,
        "batch_size": train_cfg.batch_size,
        "seed": seed,
        "holdout_before": info["holdout_before"],
        "holdout_after": info["holdout_after"],
        "losses": info["losses"],
    })
    _emit(curve, args.curve)
    if args.curve:
        _emit(_dumps({
            "command": "shape-train",
            "checkpoint": args.out,
            "curve": args.curve,
            "holdout_before": info["holdout_before"],
            "holdout_after": info["holdout_after"],
        }), None)
    return 0


def cmd_shape_predict(args, cfg):
    for path in (args.checkpoint, args.partial):
        if not os.path.exists(path):
            raise UsageError(f"input not found: {path}")
    net = ShapePredictor.create(np.random.default_rng(0))
    net.load_param_dict(ad.load_checkpoint(args.checkpoint))
    st = cfg["shape_train"]
    sets = read_point_sets(args.partial)
    from .pointops import roi_aware_pool
    from .sie import CORPUS_BOX
    completed = []
    for pts in sets:
        grid = roi_aware_pool(pts, CORPUS_BOX, st["resolution"])
        completed.append(predict_shape(grid, net).points.astype(np.float32).astype(np.float64))
    write_point_sets(args.out, completed)
    _log(f"completed {len(sets)} partial shapes")
    _emit(_dumps({
        "command": "shape-predict",
        "n_shapes": len(sets),
        "out": args.out,
        "sha256": hashlib.sha256(open(args.out, "rb").read()).hexdigest(),
    }), None)
    return 0


def _load_detection_scenes(path):
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    scenes = data["scenes"] if isinstance(data, dict) else data
    out = []
    for sc in scenes:
        out.append((str(sc["scene"]), [
            DetectionRecord(d["label"], Box7.from_array(np.array(d["box"])), float(d["score"]))
            for d in sc["detections"]
        ]))
    return out


def _load_gt_scenes(path):
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    scenes = data["scenes"] if isinstance(data, dict) else data
    out = []
    for sc in scenes:
        out.append((str(sc["scene"]), [
            (g["label"], Box7.from_array(np.array(g["box"])), g["difficulty"])
            for g in sc["gt"]
        ]))
    return out


def cmd_eval(args, cfg):
    for path in (args.detections, args.labels):
        if not os.path.exists(path):
            raise UsageError(f"input not found: {path}")
    dets = dict(_load_detection_scenes(args.detections))
    gts = dict(_load_gt_scenes(args.labels))
    ids = sorted(gts)
    ev = cfg["eval"]
    eval_cfg = EvalConfig(
        class_name=args.class_name or ev["class"],
        iou_threshold=ev["iou_threshold"],
        recall_positions=args.recall_positions or ev["recall_positions"],
        kind=ev["kind"],
        difficulty=args.difficulty or ev["difficulty"],
    )
    try:
        eval_cfg.validate()
    except ValueError as e:
        raise UsageError(str(e)) from None
    result = evaluate([dets.get(i, []) for i in ids], [gts[i] for i in ids], eval_cfg)
    result["n_scenes"] = len(ids)
    ap = result["ap"]
    _log(f"{eval_cfg.class_name} {eval_cfg.difficulty} AP@{eval_cfg.recall_positions} "
         f"({eval_cfg.kind}): {'absent' if ap is None else f'{ap:.4f}'}")
    _emit(metrics_to_json(result), args.out)
    if args.out:
        _log(f"metrics written to {args.out}")
    return 0


def cmd_pipeline(args, cfg):
    if not os.path.exists(args.points):
        raise UsageError(f"points file not found: {args.points}")
    seed = args.seed if args.seed is not None else cfg["seed"]
    points = read_velodyne(args.points)
    rng = np.random.default_rng(seed)
    scene = Scene(scene_id=args.scene_id, points=points, gt=[])
    if cfg["augment"]["gt_db"] or args.gt_db:
        db_path = args.gt_db or cfg["augment"]["gt_db"]
        if not os.path.exists(db_path):
            raise UsageError(f"gt database not found: {db_path}")
        scene = gt_sample(scene, load_gt_database(db_path), rng,
                          max_samples=cfg["augment"]["max_samples"])
        _log(f"gt sampling added {len(scene.gt)} boxes")
    if cfg["augment"]["enabled"] or args.augment:
        scene = augment(scene, rng)
        _log("applied global augmentation")
    params = _detector_from_config(cfg, seed)
    if args.shape_checkpoint:
        if not os.path.exists(args.shape_checkpoint):
            raise UsageError(f"checkpoint not found: {args.shape_checkpoint}")
        params.shape_net.load_param_dict(ad.load_checkpoint(args.shape_checkpoint))
    proposals = None
    if args.proposals:
        if not os.path.exists(args.proposals):
            raise UsageError(f"proposals file not found: {args.proposals}")
        with open(args.proposals, "r", encoding="utf-8") as fh:
            pdata = json.load(fh)
        proposals = (np.array(pdata["boxes"], dtype=np.float64).reshape(-1, 7),
                     np.array(pdata["scores"], dtype=np.float64))
    t0 = time.perf_counter()
    records = inference_pipeline(scene.points, params, proposals=proposals)
    _log(f"{len(records)} detections in {time.perf_counter() - t0:.1f}s")
    _emit(detections_to_json(args.scene_id, records), args.out)
    return 0


def cmd_bench(args, cfg):
    """Fixed micro-benchmarks; timings go to stderr, checksums to JSON."""
    rng = np.random.default_rng(cfg["seed"])
    grid = GridSpec(range_min=(0, -8, -3), range_max=(16, 8, 1), voxel_size=(0.1, 0.1, 0.2))
    pts = np.column_stack([
        rng.uniform(0, 16, 20000), rng.uniform(-8, 8, 20000),
        rng.uniform(-3, 1, 20000), rng.uniform(0, 1, 20000)])
    results = []

    def record(name, n_items, fn):
        t0 = time.perf_counter()
        value = fn()
        dt = time.perf_counter() - t0
        _log(f"{name}: {n_items / dt:,.0f} items/s ({dt * 1e3:.1f} ms)")
        results.append({"op": name, "items": n_items, "checksum": repr(float(value))})

    tensor = voxelize(pts, grid)
    record("voxelize", pts.shape[0], lambda: float(voxelize(pts, grid).features.sum()))
    rb = build_rulebook_submanifold(tensor)
    w = rng.normal(size=(27, 4, 8))
    record("rulebook_submanifold", tensor.n_active,
           lambda: float(build_rulebook_submanifold(tensor).n_pairs))
    record("sparse_conv", rb.n_pairs,
           lambda: float(sparse_conv_apply(rb, tensor.features, w).sum()))
    boxes = np.column_stack([
        rng.uniform(0, 16, 500), rng.uniform(-8, 8, 500), rng.uniform(-2, 0, 500),
        rng.uniform(2, 5, 500), rng.uniform(1, 2, 500), rng.uniform(1, 2, 500),
        rng.uniform(-np.pi, np.pi, 500)])
    record("iou3d_batch", boxes.shape[0],
           lambda: float(iou_one_to_many(boxes[0], boxes, kind="3d").sum()))
    record("fps", 4096, lambda: float(farthest_point_sample(pts[:4096, :3], 512).sum()))
    net = ShapePredictor.create(np.random.default_rng(0))
    x = rng.uniform(-0.5, 0.5, size=(64, 3))
    record("shape_forward", 64, lambda: float(shape_forward(net, x, 1).data.sum()))
    _emit(_dumps({"command": "bench", "seed": cfg["seed"], "ops": results}), args.out)
    return 0


# ============================ parser ============================


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="lidardet", description="LiDAR 3D detection toolkit")
    p.add_argument("--config", help="JSON config file (validated against the schema)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="BLAS thread cap (needs threadpoolctl)")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("make-corpus", help="generate a synthetic shape corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=256)
    sp.set_defaults(fn=cmd_make_corpus)

    sp = sub.add_parser("voxelize", help="voxelize a velodyne scan to CSV")
    sp.add_argument("--points", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_voxelize)

    sp = sub.add_parser("shape-train", help="train the shape completion net")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--curve", help="write the loss curve JSON here instead of stdout")
    sp.add_argument("--learning-rate", type=float, dest="learning_rate")
    sp.add_argument("--steps", type=int)
    sp.set_defaults(fn=cmd_shape_train)

    sp = sub.add_parser("shape-predict", help="complete partial shapes")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--partial", required=True, help="point-set container of partial shapes")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_shape_predict)

    sp = sub.add_parser("eval", help="evaluate detections against ground truth")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out")
    sp.add_argument("--class", dest="class_name")
    sp.add_argument("--difficulty", choices=["easy", "moderate", "hard"])
    sp.add_argument("--recall-positions", type=int, dest="recall_positions")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("pipeline", help="run detection on one scan")
    sp.add_argument("--points", required=True)
    sp.add_argument("--out")
    sp.add_argument("--scene-id", default="0", dest="scene_id")
    sp.add_argument("--proposals", help="JSON {boxes, scores} replacing the first stage")
    sp.add_argument("--shape-checkpoint", dest="shape_checkpoint")
    sp.add_argument("--augment", action="store_true")
    sp.add_argument("--gt-db", dest="gt_db")
    sp.set_defaults(fn=cmd_pipeline)

    sp = sub.add_parser("bench", help="micro-benchmark core ops")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be non-negative")
        limit = _limit_threads(args.threads if args.threads is not None else cfg["threads"])
        try:
            return args.fn(args, cfg)
        finally:
            if limit is not None:
                limit.unregister()
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 2
    except Exception as e:
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(int(main()))
