"""The command-line surface, driven in-process.

Every command takes explicit inputs/outputs plus a global --seed and
--config, and reruns are byte-identical. The chain below generates a
shape corpus, trains briefly, completes a partial cloud, and evaluates
stored detections against labels.
"""

import hashlib
import json
import os
import tempfile

import numpy as np

from lidardet.cli import main
from lidardet.container import write_point_sets
from lidardet.sie import load_corpus

tmp = tempfile.mkdtemp()
p = lambda name: os.path.join(tmp, name)


def run(argv):
    print(f"$ lidardet {' '.join(argv)}")
    code = main(argv)
    assert code == 0, f"exit {code}"


def digest(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()[:12]


# --- 1. a small training config ----------------------------------------------
with open(p("config.json"), "w") as fh:
    json.dump({"shape_train": {"steps": 40, "batch_size": 4,
                               "holdout_fraction": 0.25}}, fh)

# --- 2. corpus -> train -> predict --------------------------------------------
run(["--seed", "0", "make-corpus", "--out", p("corpus.bin"), "--count", "24"])
pairs = load_corpus(p("corpus.bin"))
print(f"  {len(pairs)} (partial, complete) pairs, sha256 {digest(p('corpus.bin'))}\n")

run(["--config", p("config.json"), "--seed", "1", "shape-train",
     "--corpus", p("corpus.bin"), "--out", p("net.ckpt"),
     "--curve", p("curve.json")])
curve = json.load(open(p("curve.json")))
print(f"  holdout chamfer {curve['holdout_before']:.4f} -> "
      f"{curve['holdout_after']:.4f} in {len(curve['losses'])} steps\n")

write_point_sets(p("partial.bin"),
                 [np.random.default_rng(2).uniform(-0.4, 0.4, (60, 3))])
run(["shape-predict", "--checkpoint", p("net.ckpt"),
     "--partial", p("partial.bin"), "--out", p("completed.bin")])
print(f"  completed cloud container sha256 {digest(p('completed.bin'))}\n")

# --- 3. evaluate stored detections against labels ------------------------------
boxes = [[10.0 + 12.0 * i, float(i), 0.0, 3.9, 1.6, 1.56, 0.2 * i]
         for i in range(3)]
with open(p("dets.json"), "w") as fh:
    json.dump({"scenes": [{"scene": "0", "detections": [
        {"label": "Car", "box": b, "score": 0.9 - 0.1 * i}
        for i, b in enumerate(boxes)]}]}, fh)
with open(p("labels.json"), "w") as fh:
    json.dump({"scenes": [{"scene": "0", "gt": [
        {"label": "Car", "box": b, "difficulty": "easy"} for b in boxes]}]}, fh)
run(["eval", "--detections", p("dets.json"), "--labels", p("labels.json"),
     "--out", p("metrics.json")])
print(f"  AP = {json.load(open(p('metrics.json')))['ap']}\n")

# --- 4. byte-identical reruns ---------------------------------------------------
before = digest(p("net.ckpt"))
run(["--config", p("config.json"), "--seed", "1", "shape-train",
     "--corpus", p("corpus.bin"), "--out", p("net.ckpt"),
     "--curve", p("curve.json")])
print(f"  checkpoint unchanged on rerun: {digest(p('net.ckpt')) == before}")
