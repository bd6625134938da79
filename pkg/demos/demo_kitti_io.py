"""KITTI-format I/O: scans, labels, calibration, difficulty buckets.

Velodyne scans are raw little-endian float32 (x, y, z, reflectance)
quadruples; labels are 15-field text lines in the camera frame; the
calibration file carries the rectification and camera-to-lidar
matrices. Boxes convert between camera and lidar conventions through
the calibration, and each label lands in a difficulty bucket based on
its image height, occlusion level, and truncation.
"""

import os
import tempfile

import numpy as np

from lidardet.kitti import (
    camera_box_to_lidar,
    lidar_box_to_camera,
    parse_label,
    read_calib,
    read_velodyne,
    record_difficulty,
    write_velodyne,
)

rng = np.random.default_rng(0)
tmp = tempfile.mkdtemp()

# --- 1. velodyne scans round-trip bit-exactly -------------------------------
scan = np.column_stack([
    rng.uniform(0, 70, 5000), rng.uniform(-40, 40, 5000),
    rng.uniform(-3, 1, 5000), rng.uniform(0, 1, 5000),
]).astype(np.float32).astype(np.float64)
path = os.path.join(tmp, "000000.bin")
write_velodyne(path, scan)
back = read_velodyne(path)
print(f"scan: {scan.shape[0]} points, {os.path.getsize(path)} bytes "
      f"(16 per point), bit-exact roundtrip: {np.array_equal(scan, back)}")

# --- 2. label parsing and difficulty assignment -----------------------------
label_path = os.path.join(tmp, "000000.txt")
with open(label_path, "w") as fh:
    fh.write(
        "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 "
        "1.65 1.67 3.64 -0.65 1.71 46.70 -1.59\n"
        "Car 0.40 1 1.85 387.63 181.54 423.81 203.12 "
        "1.67 1.87 3.69 -16.53 2.39 58.49 1.57\n"
        "Pedestrian 0.80 2 0.26 712.40 143.00 731.61 307.92 "
        "1.89 0.48 1.20 5.01 1.66 13.20 0.66\n"
        "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 "
        "-1 -1 -1 -1000 -1000 -1000 -10\n"
    )
records = parse_label(label_path)
print(f"\nparsed {len(records)} labels (DontCare kept by the parser, "
      f"dropped later by scene assembly)")
for rec in records:
    if rec.cls == "DontCare":
        continue
    h = rec.bbox[3] - rec.bbox[1]
    print(f"  {rec.cls:10s} box height {h:5.1f}px occ {rec.occlusion} "
          f"trunc {rec.truncation:.2f} -> {record_difficulty(rec)}")

# --- 3. calibration: camera-frame labels to lidar-frame boxes ---------------
calib_path = os.path.join(tmp, "calib.txt")
with open(calib_path, "w") as fh:
    fh.write("P2: " + " ".join(["721.54", "0", "609.56", "44.86",
                                "0", "721.54", "172.85", "0.22",
                                "0", "0", "1", "0.003"]) + "\n")
    fh.write("R0_rect: 1 0 0 0 1 0 0 0 1\n")
    fh.write("Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n")
calib = read_calib(calib_path)
print(f"\ncalibration matrices: projection {calib.projection.shape}, "
      f"rect {calib.rect.shape}, velo_to_cam {calib.velo_to_cam.shape}")

box = camera_box_to_lidar(records[0], calib)
print(f"camera-frame car at (x={records[0].location[0]}, "
      f"y={records[0].location[1]}, z={records[0].location[2]}) ->")
print(f"lidar-frame Box7 center ({box.cx:.2f}, {box.cy:.2f}, {box.cz:.2f}), "
      f"lwh ({box.l}, {box.w}, {box.h}), yaw {box.yaw:.3f}")

loc_back, hwl_back, ry_back = lidar_box_to_camera(box, calib)
err = np.abs(loc_back - records[0].location).max()
print(f"back to camera frame: location error {err:.2e}, "
      f"rotation_y error {abs(ry_back - records[0].rotation_y):.2e}")
