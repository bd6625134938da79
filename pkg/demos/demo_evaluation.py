"""Detection evaluation: greedy matching, AP at 11/40 recall points,
range-bucketed breakdowns.

Detections are matched to ground truth greedily in descending score
order (highest-IoU eligible gt wins, each gt used once). Matched flags
pool across scenes into one precision/recall curve; AP averages the
best precision at each recall position. Bucketed AP splits ground
truths by planar distance, with detections following their matched gt.
"""

import numpy as np

from lidardet.detect import DetectionRecord
from lidardet.geometry import Box7
from lidardet.metrics import (
    EvalConfig,
    average_precision,
    evaluate,
    match_detections,
    metrics_to_json,
    range_bucketed_ap,
)

rng = np.random.default_rng(0)


def car(x, y, yaw=0.0):
    return Box7(x, y, 0.0, 3.9, 1.6, 1.56, yaw)


# --- 1. matching on one scene ------------------------------------------------
gts = [("Car", car(10, 0), "easy"), ("Car", car(30, 5, 0.5), "moderate"),
       ("Car", car(55, -8), "hard")]
dets = [
    DetectionRecord("Car", car(10.2, 0.1), 0.95),   # good match
    DetectionRecord("Car", car(10.5, 0.3), 0.60),   # duplicate, gt taken
    DetectionRecord("Car", car(30, 5, 0.5), 0.90),  # exact match
    DetectionRecord("Car", car(80, 20), 0.40),      # nothing there
]
cfg = EvalConfig(class_name="Car", difficulty="hard", recall_positions=40)
m = match_detections(dets, gts, cfg)
print("detections in visit order (descending score):")
for k, di in enumerate(m["det_indices"]):
    tag = {1: "TP", 0: "FP", -1: "ignored"}[int(m["flags"][k])]
    gi = int(m["matched_gt"][k])
    where = f" -> gt {gi}" if gi >= 0 else ""
    print(f"  score {dets[di].score:.2f}: {tag}{where}")

# --- 2. AP over 100 synthetic scenes ------------------------------------------
scene_dets, scene_gts = [], []
for s in range(100):
    gt_boxes = [car(8.0 * (g + 1), rng.uniform(-15, 15), rng.uniform(-1, 1))
                for g in range(int(rng.integers(1, 5)))]
    scene_gts.append([("Car", b, "easy") for b in gt_boxes])
    d = []
    for b in gt_boxes:
        if rng.random() < 0.8:  # 80% recall
            d.append(DetectionRecord("Car", b, float(rng.uniform(0.5, 1.0))))
    for _ in range(rng.integers(0, 2)):  # occasional false positive
        d.append(DetectionRecord("Car", car(rng.uniform(60, 90), 25),
                                 float(rng.uniform(0.0, 0.6))))
    scene_dets.append(d)

ap11 = average_precision(scene_dets, scene_gts, EvalConfig(recall_positions=11))
ap40 = average_precision(scene_dets, scene_gts, EvalConfig(recall_positions=40))
print(f"\nimperfect detector: AP@11 = {ap11:.2f}, AP@40 = {ap40:.2f}")

perfect = [[DetectionRecord(c, b, 0.9) for c, b, _ in gts] for gts in scene_gts]
print(f"perfect detector:   AP@11 = "
      f"{average_precision(perfect, scene_gts, EvalConfig(recall_positions=11)):.1f}, "
      f"AP@40 = "
      f"{average_precision(perfect, scene_gts, EvalConfig(recall_positions=40)):.1f}")

# --- 3. range buckets ----------------------------------------------------------
buckets = range_bucketed_ap(scene_dets, scene_gts, EvalConfig())
print("\nAP by gt distance:")
for name in ("0-20", "20-40", "40-inf"):
    b = buckets[name]
    if b is None:
        print(f"  {name:7s}: no ground truth")
    else:
        print(f"  {name:7s}: ap {b['ap']:6.2f} over {b['n_gt']} gts")

# --- 4. the full report as stable JSON ------------------------------------------
result = evaluate(scene_dets, scene_gts, EvalConfig())
text = metrics_to_json(result)
print(f"\nevaluate() -> keys {sorted(result.keys())}")
print(f"JSON report is {len(text)} bytes, deterministic across reruns: "
      f"{text == metrics_to_json(evaluate(scene_dets, scene_gts, EvalConfig()))}")
