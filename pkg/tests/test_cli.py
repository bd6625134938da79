"""Tests for the command-line front end: exit codes and reproducible output."""

import json

import numpy as np
import pytest

from lidardet.cli import DEFAULT_CONFIG, load_config, main
from lidardet.container import write_point_sets
from lidardet.geometry import Box7, from_canonical
from lidardet.kitti import Scene, build_gt_database, save_gt_database, write_velodyne


# ------------------------------------------------------------------
# helpers
# ------------------------------------------------------------------

SMALL_GRID = {
    "grid": {
        "range_min": [0.0, -3.2, -1.0],
        "range_max": [6.4, 3.2, 1.0],
        "voxel_size": [0.1, 0.1, 0.1],
    },
    "anchors": {"size": [3.9, 1.6, 1.56], "yaws": [0.0, 1.5707963267948966],
                "z_center": 0.0, "bev_stride": 8},
    "pipeline": {"n_keypoints": 64, "pre_nms_top": 32, "post_nms_top": 8,
                 "pool_resolution": 4},
}


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def write_scan(tmp_path, n=60, seed=0, name="scan.bin"):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([
        rng.uniform(0.5, 5.9, n), rng.uniform(-2.7, 2.7, n),
        rng.uniform(-0.9, 0.9, n), rng.uniform(0.0, 1.0, n)])
    path = tmp_path / name
    write_velodyne(str(path), pts)
    return str(path)


def run(capsys, argv):
    """Run the CLI in-process, returning (exit_code, stdout, stderr)."""
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ------------------------------------------------------------------
# config handling and exit codes
# ------------------------------------------------------------------


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "make-corpus" in capsys.readouterr().out


def test_unknown_flag_exits_one(capsys):
    code, _, err = run(capsys, ["--bogus", "bench"])
    assert code == 1
    assert "error" in err


def test_missing_subcommand_exits_one(capsys):
    code, _, _ = run(capsys, [])
    assert code == 1


def test_missing_input_file_exits_one(capsys, tmp_path):
    code, _, err = run(capsys, ["voxelize", "--points", str(tmp_path / "none.bin"),
                                "--out", str(tmp_path / "v.csv")])
    assert code == 1
    assert "not found" in err


def test_invalid_config_json_exits_one(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    code, _, err = run(capsys, ["--config", str(path), "bench"])
    assert code == 1
    assert "not valid JSON" in err


def test_unknown_config_key_named_with_dotted_path(capsys, tmp_path):
    cfg = write_config(tmp_path, {"pipeline": {"n_keypoint": 64}})
    code, _, err = run(capsys, ["--config", cfg, "bench"])
    assert code == 1
    assert "pipeline.n_keypoint" in err


def test_unknown_top_level_config_key(capsys, tmp_path):
    cfg = write_config(tmp_path, {"grids": {}})
    code, _, err = run(capsys, ["--config", cfg, "bench"])
    assert code == 1
    assert "unknown config key: grids" in err


def test_negative_seed_exits_one(capsys, tmp_path):
    code, _, err = run(capsys, ["--seed", "-3", "bench"])
    assert code == 1
    assert "seed" in err


def test_runtime_error_exits_two(capsys, tmp_path):
    ckpt = tmp_path / "trash.ckpt"
    ckpt.write_bytes(b"not a checkpoint")
    partial = tmp_path / "partial.bin"
    write_point_sets(str(partial), [np.zeros((10, 3))])
    code, _, err = run(capsys, ["shape-predict", "--checkpoint", str(ckpt),
                                "--partial", str(partial),
                                "--out", str(tmp_path / "done.bin")])
    assert code == 2
    assert "runtime error" in err


def test_load_config_defaults_roundtrip():
    cfg = load_config(None)
    assert cfg == DEFAULT_CONFIG
    assert cfg is not DEFAULT_CONFIG  # defensive copy, not the shared object
    cfg["grid"]["voxel_size"] = [1.0, 1.0, 1.0]
    assert DEFAULT_CONFIG["grid"]["voxel_size"] == [0.05, 0.05, 0.1]


def test_load_config_merges_partial_override(tmp_path):
    cfg_path = write_config(tmp_path, {"pipeline": {"n_keypoints": 99}})
    cfg = load_config(cfg_path)
    assert cfg["pipeline"]["n_keypoints"] == 99
    assert cfg["pipeline"]["pre_nms_top"] == DEFAULT_CONFIG["pipeline"]["pre_nms_top"]
    assert cfg["grid"] == DEFAULT_CONFIG["grid"]


# ------------------------------------------------------------------
# make-corpus / voxelize
# ------------------------------------------------------------------


def test_make_corpus_rerun_byte_identical(capsys, tmp_path):
    out = str(tmp_path / "corpus.bin")
    argv = ["--seed", "7", "make-corpus", "--out", out, "--count", "8"]
    code1, out1, _ = run(capsys, argv)
    bytes1 = open(out, "rb").read()
    code2, out2, _ = run(capsys, argv)
    bytes2 = open(out, "rb").read()
    assert code1 == code2 == 0
    assert out1 == out2
    assert bytes1 == bytes2
    payload = json.loads(out1)
    assert payload["count"] == 8
    assert payload["seed"] == 7
    import hashlib
    assert payload["sha256"] == hashlib.sha256(bytes1).hexdigest()


def test_make_corpus_seed_changes_output(capsys, tmp_path):
    out = str(tmp_path / "corpus.bin")
    _, _, _ = run(capsys, ["--seed", "1", "make-corpus", "--out", out, "--count", "4"])
    bytes1 = open(out, "rb").read()
    _, _, _ = run(capsys, ["--seed", "2", "make-corpus", "--out", out, "--count", "4"])
    assert open(out, "rb").read() != bytes1


def test_voxelize_rerun_byte_identical(capsys, tmp_path):
    cfg = write_config(tmp_path, SMALL_GRID)
    scan = write_scan(tmp_path)
    out = str(tmp_path / "voxels.csv")
    argv = ["--config", cfg, "voxelize", "--points", scan, "--out", out]
    code1, out1, err1 = run(capsys, argv)
    csv1 = open(out, "rb").read()
    code2, out2, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert out1 == out2
    assert open(out, "rb").read() == csv1
    payload = json.loads(out1)
    assert payload["n_points"] == 60
    assert payload["n_voxels"] > 0
    assert payload["dims_zyx"] == [20, 64, 64]
    assert csv1.decode("ascii").splitlines()[0].startswith("z,y,x,")


# ------------------------------------------------------------------
# shape-train / shape-predict
# ------------------------------------------------------------------


def shape_cli_fixture(capsys, tmp_path):
    corpus = str(tmp_path / "corpus.bin")
    code, _, _ = run(capsys, ["--seed", "3", "make-corpus", "--out", corpus, "--count", "6"])
    assert code == 0
    cfg = write_config(tmp_path, {"shape_train": {"steps": 4, "batch_size": 2,
                                                  "holdout_fraction": 0.34}})
    return corpus, cfg


def test_shape_train_rerun_byte_identical(capsys, tmp_path):
    corpus, cfg = shape_cli_fixture(capsys, tmp_path)
    ckpt = str(tmp_path / "net.ckpt")
    curve = str(tmp_path / "curve.json")
    argv = ["--config", cfg, "--seed", "5", "shape-train", "--corpus", corpus,
            "--out", ckpt, "--curve", curve]
    code1, out1, _ = run(capsys, argv)
    ckpt1, curve1 = open(ckpt, "rb").read(), open(curve, "rb").read()
    code2, out2, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert out1 == out2
    assert open(ckpt, "rb").read() == ckpt1
    assert open(curve, "rb").read() == curve1
    payload = json.loads(curve1)
    assert payload["steps"] == 4
    assert len(payload["losses"]) == 4
    assert payload["holdout_after"] is not None


def test_shape_train_zero_learning_rate_leaves_net_at_init(capsys, tmp_path):
    corpus, cfg = shape_cli_fixture(capsys, tmp_path)
    ckpt_a = str(tmp_path / "a.ckpt")
    ckpt_b = str(tmp_path / "b.ckpt")
    base = ["--config", cfg, "--seed", "5", "shape-train", "--corpus", corpus,
            "--learning-rate", "0"]
    code, _, _ = run(capsys, base + ["--out", ckpt_a, "--steps", "1"])
    assert code == 0
    code, _, _ = run(capsys, base + ["--out", ckpt_b, "--steps", "4"])
    assert code == 0
    # With the step size pinned to zero the parameters never move, so the
    # checkpoint is the same no matter how long the run is.
    assert open(ckpt_a, "rb").read() == open(ckpt_b, "rb").read()


def test_shape_predict_rerun_byte_identical(capsys, tmp_path):
    corpus, cfg = shape_cli_fixture(capsys, tmp_path)
    ckpt = str(tmp_path / "net.ckpt")
    code, _, _ = run(capsys, ["--config", cfg, "shape-train", "--corpus", corpus,
                              "--out", ckpt, "--curve", str(tmp_path / "c.json")])
    assert code == 0
    rng = np.random.default_rng(11)
    partial = str(tmp_path / "partial.bin")
    write_point_sets(partial, [rng.uniform(-0.4, 0.4, size=(50, 3)),
                               rng.uniform(-0.4, 0.4, size=(33, 3))])
    out = str(tmp_path / "completed.bin")
    argv = ["shape-predict", "--checkpoint", ckpt, "--partial", partial, "--out", out]
    code1, out1, _ = run(capsys, argv)
    done1 = open(out, "rb").read()
    code2, out2, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert out1 == out2
    assert open(out, "rb").read() == done1
    assert json.loads(out1)["n_shapes"] == 2


# ------------------------------------------------------------------
# eval
# ------------------------------------------------------------------


def eval_fixture(tmp_path):
    boxes = [Box7(5.0 + 12.0 * i, 0.0, 0.0, 3.9, 1.6, 1.56, 0.3 * i) for i in range(3)]
    gts = {"scenes": [{
        "scene": "000", "gt": [
            {"label": "Car", "box": list(b.as_array()), "difficulty": "easy"}
            for b in boxes
        ]}]}
    dets = {"scenes": [{
        "scene": "000", "detections": [
            {"label": "Car", "box": list(b.as_array()), "score": 0.9 - 0.1 * i}
            for i, b in enumerate(boxes)
        ]}]}
    det_path = tmp_path / "dets.json"
    gt_path = tmp_path / "gts.json"
    det_path.write_text(json.dumps(dets))
    gt_path.write_text(json.dumps(gts))
    return str(det_path), str(gt_path)


def test_eval_perfect_detector_scores_100(capsys, tmp_path):
    det_path, gt_path = eval_fixture(tmp_path)
    out = str(tmp_path / "metrics.json")
    code, _, err = run(capsys, ["eval", "--detections", det_path, "--labels", gt_path,
                                "--out", out])
    assert code == 0
    payload = json.loads(open(out).read())
    assert payload["ap"] == 100.0
    assert payload["per_bucket"]["0-20"]["ap"] == 100.0
    assert "100.0000" in err


def test_eval_rerun_byte_identical(capsys, tmp_path):
    det_path, gt_path = eval_fixture(tmp_path)
    argv = ["eval", "--detections", det_path, "--labels", gt_path,
            "--recall-positions", "11"]
    code1, out1, _ = run(capsys, argv)
    code2, out2, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert out1 == out2
    assert json.loads(out1)["recall_positions"] == 11


def test_eval_bad_difficulty_flag_exits_one(capsys, tmp_path):
    det_path, gt_path = eval_fixture(tmp_path)
    code, _, _ = run(capsys, ["eval", "--detections", det_path, "--labels", gt_path,
                              "--difficulty", "impossible"])
    assert code == 1


def test_eval_bad_recall_positions_exits_one(capsys, tmp_path):
    det_path, gt_path = eval_fixture(tmp_path)
    code, _, err = run(capsys, ["eval", "--detections", det_path, "--labels", gt_path,
                                "--recall-positions", "17"])
    assert code == 1
    assert "recall_positions" in err


# ------------------------------------------------------------------
# pipeline
# ------------------------------------------------------------------


def test_pipeline_rerun_byte_identical(capsys, tmp_path):
    cfg = write_config(tmp_path, SMALL_GRID)
    scan = write_scan(tmp_path, n=120)
    out = str(tmp_path / "dets.json")
    argv = ["--config", cfg, "--seed", "4", "pipeline", "--points", scan,
            "--out", out, "--scene-id", "42"]
    code1, out1, _ = run(capsys, argv)
    json1 = open(out, "rb").read()
    code2, out2, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert out1 == out2
    assert open(out, "rb").read() == json1
    payload = json.loads(json1)
    assert payload["scene"] == "42"
    assert isinstance(payload["detections"], list)


def test_pipeline_with_augment_and_gt_db_byte_identical(capsys, tmp_path):
    cfg = write_config(tmp_path, SMALL_GRID)
    scan = write_scan(tmp_path, n=80)
    # Build a small crop database inside the pipeline's grid range.
    rng = np.random.default_rng(20)
    boxes = [Box7(1.5 + 1.6 * i, -1.0 + 0.7 * i, 0.0, 1.2, 0.8, 0.6, 0.2 * i)
             for i in range(3)]
    blocks = []
    for b in boxes:
        local = rng.uniform(-0.4, 0.4, size=(12, 3)) * np.array([b.l, b.w, b.h])
        blocks.append(from_canonical(local, b))
    xyz = np.concatenate(blocks)
    pts = np.concatenate([xyz, np.zeros((xyz.shape[0], 1))], axis=1)
    scene = Scene("db", pts, [("Car", b, "easy") for b in boxes])
    db_path = str(tmp_path / "gt_db.bin")
    save_gt_database(build_gt_database([scene]), db_path)

    out = str(tmp_path / "dets.json")
    argv = ["--config", cfg, "--seed", "9", "pipeline", "--points", scan,
            "--out", out, "--augment", "--gt-db", db_path]
    code1, _, err1 = run(capsys, argv)
    json1 = open(out, "rb").read()
    code2, _, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert open(out, "rb").read() == json1
    assert "gt sampling" in err1


def test_pipeline_proposals_hook(capsys, tmp_path):
    cfg = write_config(tmp_path, SMALL_GRID)
    scan = write_scan(tmp_path, n=100)
    props = tmp_path / "props.json"
    props.write_text(json.dumps({
        "boxes": [[3.0, 0.0, 0.0, 3.9, 1.6, 1.56, 0.0]],
        "scores": [0.9],
    }))
    out = str(tmp_path / "dets.json")
    argv = ["--config", cfg, "pipeline", "--points", scan, "--out", out,
            "--proposals", str(props)]
    code1, _, _ = run(capsys, argv)
    json1 = open(out, "rb").read()
    code2, _, _ = run(capsys, argv)
    assert code1 == code2 == 0
    assert open(out, "rb").read() == json1


# ------------------------------------------------------------------
# bench
# ------------------------------------------------------------------


def test_bench_checksums_deterministic_and_timings_on_stderr(capsys, tmp_path):
    out = str(tmp_path / "bench.json")
    code1, stdout1, err1 = run(capsys, ["bench", "--out", out])
    json1 = open(out, "rb").read()
    code2, _, _ = run(capsys, ["bench", "--out", out])
    assert code1 == code2 == 0
    assert open(out, "rb").read() == json1  # timings never reach the JSON
    assert stdout1 == ""
    assert "items/s" in err1
    payload = json.loads(json1)
    ops = [row["op"] for row in payload["ops"]]
    assert "voxelize" in ops and "sparse_conv" in ops and "fps" in ops
    for row in payload["ops"]:
        float(row["checksum"])  # every checksum parses back to a float
