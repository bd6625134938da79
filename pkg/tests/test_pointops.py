import math

import numpy as np
import pytest

from lidardet.geometry import Box7
from lidardet.pointops import (
    GridPoolConfig,
    GridPoolParams,
    KeypointAttention,
    MsgConfig,
    MsgParams,
    VsaParams,
    ball_query,
    farthest_point_sample,
    msg_extract,
    pointnet_unit,
    reweight_keypoints,
    roi_aware_pool,
    roi_grid_pool,
    sample_keypoints,
    three_nn_interpolate,
    vsa_aggregate,
)


def brute_fps(pts, k, seed_index=0):
    """O(N^2 k) greedy max-min reference with ties to the lowest index."""
    chosen = [seed_index]
    for _ in range(1, k):
        best_d, best_i = -1.0, None
        for i in range(len(pts)):
            d = min(float(np.sum((pts[i] - pts[j]) ** 2)) for j in chosen)
            if d > best_d:
                best_d, best_i = d, i
        chosen.append(best_i)
    return chosen


def test_fps_all_points():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
    idx = farthest_point_sample(pts, 3)
    assert sorted(idx) == [0, 1, 2]
    assert idx[0] == 0


def test_fps_collinear_hand_cases():
    pts = np.column_stack([np.arange(10.0), np.zeros(10), np.zeros(10)])
    assert list(farthest_point_sample(pts, 2)) == [0, 9]
    # third pick: distances min(i^2, (9-i)^2) tie at i=4 and i=5 -> lowest wins
    assert list(farthest_point_sample(pts, 3)) == [0, 9, 4]


def test_fps_matches_brute_force():
    rng = np.random.default_rng(0)
    for n, k in [(30, 7), (60, 17), (128, 40)]:
        pts = rng.normal(size=(n, 3))
        got = list(farthest_point_sample(pts, k))
        assert got == brute_fps(pts, k)


def test_fps_min_distance_monotone():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 3))
    prev = math.inf
    for k in range(2, 25):
        sel = pts[farthest_point_sample(pts, k)]
        d2 = np.sum((sel[:, None, :] - sel[None, :, :]) ** 2, axis=2)
        d2[np.diag_indices(k)] = math.inf
        cur = d2.min()
        assert cur <= prev + 1e-12
        prev = cur


def test_fps_k_out_of_range():
    pts = np.zeros((4, 3))
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 5)
    with pytest.raises(ValueError):
        farthest_point_sample(pts, 0)


def test_sample_keypoints_pads_small_scenes():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    idx, xyz = sample_keypoints(pts, count=8)
    assert list(idx) == [0, 1, 2, 0, 1, 2, 0, 1]
    assert xyz.shape == (8, 3)


def test_ball_query_basic_and_padding():
    centers = np.zeros((1, 3))
    pts = np.array([[0.5, 0, 0], [2.0, 0, 0]])
    idx, counts = ball_query(centers, pts, radius=1.0, max_neighbors=3)
    assert list(idx[0]) == [0, 0, 0]
    assert counts[0] == 1


def test_ball_query_truncates_to_lowest_indices():
    centers = np.zeros((1, 3))
    pts = np.array([[0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0], [0.4, 0, 0], [0.5, 0, 0]])
    idx, counts = ball_query(centers, pts, radius=1.0, max_neighbors=3)
    assert list(idx[0]) == [0, 1, 2]
    assert counts[0] == 3


def test_ball_query_empty_fallback_nearest():
    centers = np.zeros((1, 3))
    pts = np.array([[5.0, 0, 0], [3.0, 0, 0], [4.0, 0, 0]])
    idx, counts = ball_query(centers, pts, radius=1.0, max_neighbors=4)
    assert list(idx[0]) == [1, 1, 1, 1]
    assert counts[0] == 0


def test_ball_query_matches_brute_force():
    rng = np.random.default_rng(2)
    centers = rng.normal(size=(20, 3))
    pts = rng.normal(size=(128, 3))
    radius, t = 0.8, 5
    idx, counts = ball_query(centers, pts, radius, t)
    for r, center in enumerate(centers):
        d = np.sqrt(np.sum((pts - center) ** 2, axis=1))
        hits = [i for i in range(len(pts)) if d[i] <= radius]
        if not hits:
            nearest = int(np.argmin(d))
            assert list(idx[r]) == [nearest] * t
            assert counts[r] == 0
            continue
        take = hits[:t]
        expect = take + [take[0]] * (t - len(take))
        assert list(idx[r]) == expect
        assert counts[r] == len(take)
        assert all(d[i] <= radius for i in idx[r][: counts[r]])


def test_ball_query_validation():
    with pytest.raises(ValueError):
        ball_query(np.zeros((1, 3)), np.zeros((0, 3)), 1.0, 2)
    with pytest.raises(ValueError):
        ball_query(np.zeros((1, 3)), np.zeros((1, 3)), -1.0, 2)


def test_three_nn_coincident_query():
    src = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [3, 3, 3]])
    feats = np.array([[10.0], [20.0], [30.0], [40.0]])
    out = three_nn_interpolate(np.array([[1.0, 0, 0]]), src, feats)
    assert abs(out[0, 0] - 20.0) < 1e-6


def test_three_nn_equidistant_pair():
    src = np.array([[1.0, 0, 0], [-1.0, 0, 0], [100.0, 0, 0]])
    feats = np.array([[2.0], [4.0], [1000.0]])
    out = three_nn_interpolate(np.array([[0.0, 0, 0]]), src, feats)
    # inverse-distance weights over distances (1, 1, 100): the two unit
    # sources share weight equally, the far third gets ~0.5%
    w = 1.0 / (np.array([1.0, 1.0, 100.0]) + 1e-8)
    w /= w.sum()
    expect = float(w @ np.array([2.0, 4.0, 1000.0]))
    assert abs(out[0, 0] - expect) < 1e-9
    assert abs(w[0] - w[1]) < 1e-12


def test_three_nn_partition_of_unity():
    rng = np.random.default_rng(3)
    src = rng.normal(size=(40, 3))
    feats = np.full((40, 2), 7.25)
    q = rng.normal(size=(25, 3))
    out = three_nn_interpolate(q, src, feats)
    assert np.abs(out - 7.25).max() < 1e-12


def test_three_nn_fewer_than_three_sources():
    src = np.array([[0.0, 0, 0]])
    out = three_nn_interpolate(np.array([[5.0, 5, 5]]), src, np.array([[3.0]]))
    assert abs(out[0, 0] - 3.0) < 1e-12


def brute_roi_pool(pts, box, res):
    """Independent canonicalize-and-bucket reference."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    means = np.zeros((res ** 3, 3))
    counts = np.zeros(res ** 3)
    for x, y, z in pts:
        dx, dy, dz = x - box.cx, y - box.cy, z - box.cz
        local = np.array([c * dx + s * dy, -s * dx + c * dy, dz])
        half = np.array([box.l, box.w, box.h]) / 2
        if (np.abs(local) > half).any():
            continue
        cell_idx = []
        for a in range(3):
            cell = 2 * half[a] / res
            k = 0
            while k < res - 1 and local[a] > -half[a] + (k + 1) * cell:
                k += 1
            cell_idx.append(k)
        flat = (cell_idx[0] * res + cell_idx[1]) * res + cell_idx[2]
        means[flat] += local
        counts[flat] += 1
    occ = counts > 0
    means[occ] /= counts[occ, None]
    return means, occ


def test_roi_aware_pool_center_point():
    box = Box7(1.0, 2.0, 3.0, 2, 2, 2, 0.4)
    grid3 = roi_aware_pool(np.array([[1.0, 2.0, 3.0]]), box, resolution=3)
    assert grid3.occupancy.sum() == 1
    assert grid3.occupancy[(1 * 3 + 1) * 3 + 1]
    # even resolution: the center sits on the cell boundary, lower cell wins
    grid2 = roi_aware_pool(np.array([[1.0, 2.0, 3.0]]), box, resolution=2)
    assert grid2.occupancy.sum() == 1
    assert grid2.occupancy[0]


def test_roi_aware_pool_outside_excluded():
    box = Box7(0, 0, 0, 2, 2, 2, 0.0)
    grid = roi_aware_pool(np.array([[5.0, 0, 0], [0.0, 0, 1.01]]), box, 4)
    assert not grid.occupancy.any()
    assert np.all(grid.matrix == 0.0)


def test_roi_aware_pool_matches_brute_force():
    rng = np.random.default_rng(4)
    for _ in range(5):
        box = Box7(
            rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-1, 1),
            rng.uniform(1, 4), rng.uniform(1, 3), rng.uniform(1, 2),
            rng.uniform(-math.pi, math.pi),
        )
        pts = rng.uniform(-3, 3, size=(128, 3))
        got = roi_aware_pool(pts, box, resolution=4)
        means, occ = brute_roi_pool(pts, box, 4)
        assert np.array_equal(got.occupancy, occ)
        assert np.abs(got.cell_means - means).max() < 1e-12


def test_roi_aware_pool_means_inside_cells():
    rng = np.random.default_rng(5)
    box = Box7(0.5, -0.5, 0.2, 3, 2, 1.5, 0.9)
    pts = rng.uniform(-2, 2, size=(500, 3))
    res = 4
    grid = roi_aware_pool(pts, box, res)
    half = np.array([box.l, box.w, box.h]) / 2
    cell = 2 * half / res
    for flat in np.flatnonzero(grid.occupancy):
        ix, iy, iz = flat // (res * res), (flat // res) % res, flat % res
        lo = -half + np.array([ix, iy, iz]) * cell
        m = grid.cell_means[flat]
        assert (m >= lo - 1e-12).all() and (m <= lo + cell + 1e-12).all()


def test_roi_aware_pool_rigid_motion_invariant():
    rng = np.random.default_rng(6)
    box = Box7(1.0, 2.0, 0.0, 3, 2, 1.5, 0.3)
    pts = rng.uniform(-2, 4, size=(300, 3))
    base = roi_aware_pool(pts, box, 5)
    dyaw, dx, dy = 0.77, 4.0, -2.5
    c, s = math.cos(dyaw), math.sin(dyaw)
    moved_pts = pts.copy()
    moved_pts[:, 0] = c * pts[:, 0] - s * pts[:, 1] + dx
    moved_pts[:, 1] = s * pts[:, 0] + c * pts[:, 1] + dy
    moved_box = Box7(
        c * box.cx - s * box.cy + dx, s * box.cx + c * box.cy + dy, box.cz,
        box.l, box.w, box.h, box.yaw + dyaw,
    )
    moved = roi_aware_pool(moved_pts, moved_box, 5)
    assert np.array_equal(base.occupancy, moved.occupancy)
    assert np.abs(base.cell_means - moved.cell_means).max() < 1e-9


def test_pointnet_unit_hand_case():
    groups = np.array([[[1.0, -2.0], [3.0, 0.5]]])  # one group, two points
    layers = [(np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]), np.zeros(3))]
    out = pointnet_unit(groups, layers)
    # per point relu then max over the group
    assert np.abs(out - np.array([[3.0, 0.5, 0.0]])).max() < 1e-15


def test_msg_extract_shape_and_permutation():
    rng = np.random.default_rng(7)
    cfg = MsgConfig(n_centers=16, max_neighbors=8, radii=(0.3, 0.6), channels=24, hidden=12)
    params = MsgParams.create(cfg, rng)
    pts = rng.normal(size=(100, 3))
    out = msg_extract(pts, cfg, params)
    assert out.shape == (24,)
    shuffled = pts[rng.permutation(100)]
    assert np.array_equal(msg_extract(shuffled, cfg, params), out)


def test_msg_extract_zero_weights_gives_bias():
    rng = np.random.default_rng(8)
    cfg = MsgConfig(n_centers=8, max_neighbors=4, radii=(0.3, 0.6), channels=6, hidden=5)
    params = MsgParams.create(cfg, rng)
    params.fc_weight = np.zeros_like(params.fc_weight)
    out = msg_extract(rng.normal(size=(50, 3)), cfg, params)
    assert np.array_equal(out, params.fc_bias)


def test_msg_extract_too_few_points():
    rng = np.random.default_rng(9)
    cfg = MsgConfig(n_centers=32)
    params = MsgParams.create(cfg, rng)
    with pytest.raises(ValueError):
        msg_extract(rng.normal(size=(10, 3)), cfg, params)


def test_roi_grid_pool_shape_and_single_keypoint():
    box = Box7(0, 0, 0, 2, 2, 2, 0.0)
    kp = np.array([[0.1, 0.2, -0.1]])
    kf = np.array([[0.5, -1.5]])
    cfg = GridPoolConfig(grid_size=6, radii=(10.0, 20.0), max_neighbors=4)
    # identity encoders: W = I over (rel, feat), zero bias
    eye = np.eye(5)
    params = GridPoolParams(scale_layers=[[(eye, np.zeros(5))], [(eye, np.zeros(5))]])
    out = roi_grid_pool(box, kp, kf, cfg, params)
    assert out.features.shape == (216, 10)
    assert not out.used_fallback
    rel = kp[0] - out.grid_points
    expect_scale = np.maximum(np.concatenate([rel, np.tile(kf[0], (216, 1))], axis=1), 0.0)
    assert np.abs(out.features[:, :5] - expect_scale).max() < 1e-12
    assert np.abs(out.features[:, 5:] - expect_scale).max() < 1e-12


def test_roi_grid_pool_fallback_flag():
    box = Box7(0, 0, 0, 2, 2, 2, 0.0)
    kp = np.array([[50.0, 50.0, 50.0]])
    kf = np.array([[1.0]])
    cfg = GridPoolConfig(grid_size=2, radii=(0.5, 1.0), max_neighbors=2)
    params = GridPoolParams.create(cfg, keypoint_channels=1, rng=np.random.default_rng(0))
    out = roi_grid_pool(box, kp, kf, cfg, params)
    assert out.used_fallback
    assert np.isfinite(out.features).all()


def test_roi_grid_pool_translation_invariant():
    rng = np.random.default_rng(10)
    box = Box7(0.5, -1.0, 0.0, 3, 2, 1.5, 0.6)
    kp = rng.uniform(-2, 2, size=(30, 3))
    kf = rng.normal(size=(30, 4))
    cfg = GridPoolConfig(grid_size=4, radii=(0.8, 1.6), max_neighbors=8)
    params = GridPoolParams.create(cfg, keypoint_channels=4, rng=rng)
    base = roi_grid_pool(box, kp, kf, cfg, params)
    shift = np.array([10.0, -7.0, 3.0])
    moved_box = Box7(box.cx + shift[0], box.cy + shift[1], box.cz + shift[2],
                     box.l, box.w, box.h, box.yaw)
    moved = roi_grid_pool(moved_box, kp + shift, kf, cfg, params)
    assert np.abs(base.features - moved.features).max() < 1e-9


def test_vsa_aggregate_shapes_and_empty_level():
    rng = np.random.default_rng(11)
    kp = rng.normal(size=(10, 3))
    levels = [
        (rng.normal(size=(40, 3)), rng.normal(size=(40, 4))),
        (np.zeros((0, 3)), np.zeros((0, 8))),
    ]
    params = VsaParams.create([4, 8], rng, radii=(1.0, 2.0), max_neighbors=4, out_each=6)
    out = vsa_aggregate(kp, levels, params)
    assert out.shape == (10, 12)
    assert np.all(out[:, 6:] == 0.0)  # empty level contributes zeros


def test_reweight_keypoints():
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(7, 8))
    attn = KeypointAttention.create(8, rng)
    scaled, wgt = reweight_keypoints(feats, attn)
    assert ((wgt > 0) & (wgt < 1)).all()
    h = np.maximum(feats @ attn.w1.T + attn.b1, 0.0)
    expect_w = 1.0 / (1.0 + np.exp(-(h @ attn.w2.T + attn.b2)))
    assert np.abs(scaled - feats * expect_w).max() < 1e-12
    assert np.abs(np.abs(scaled) - np.abs(feats) * wgt[:, None]).max() < 1e-12
