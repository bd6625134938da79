"""Point set operators: sampling, grouping, interpolation, and RoI pooling.

All operators are deterministic. Ties in farthest point sampling and in
nearest-point fallbacks resolve to the lowest index; ball query returns
neighbor indices in ascending order and pads short groups by repeating
the first found neighbor. Distances are Euclidean in float64, compared
as squared values, with boundary membership inclusive (d <= radius).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import to_canonical, from_canonical

__all__ = [
    "farthest_point_sample",
    "sample_keypoints",
    "ball_query",
    "three_nn_interpolate",
    "PooledPointGrid",
    "roi_aware_pool",
    "MsgConfig",
    "MsgParams",
    "msg_extract",
    "GridPoolConfig",
    "GridPoolParams",
    "GridPointFeatures",
    "roi_grid_pool",
    "VsaParams",
    "vsa_aggregate",
    "KeypointAttention",
    "reweight_keypoints",
    "pointnet_unit",
]


def farthest_point_sample(points, k, seed_index=0):
    """Greedy max-min sampling of k point indices.

    Starts from seed_index; each step adds the point with the largest
    distance to the selected set, breaking exact ties toward the lowest
    index (argmax takes the first maximum).

    Args:
        points: (N, 3)
        k: number of samples, 1 <= k <= N
    Returns:
        (k,) int64 indices
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"farthest_point_sample: k={k} outside [1, {n}]")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed_index
    best = np.sum((pts - pts[seed_index]) ** 2, axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(best))
        chosen[i] = nxt
        d = np.sum((pts - pts[nxt]) ** 2, axis=1)
        np.minimum(best, d, out=best)
    return chosen


def sample_keypoints(points, count=2048):
    """FPS keypoint selection with pad-by-repetition when the scene is small.

    Returns (indices, xyz); when N < count the index list cycles through
    the available points until it reaches the requested length.
    """
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    n = pts.shape[0]
    if n == 0:
        raise ValueError("sample_keypoints: empty point set")
    if n >= count:
        idx = farthest_point_sample(pts, count)
    else:
        idx = np.arange(count, dtype=np.int64) % n
    return idx, pts[idx]


def ball_query(centers, points, radius, max_neighbors):
    """Fixed-size neighborhoods within a radius.

    For each center, collect indices of points with distance <= radius in
    ascending index order, truncated to max_neighbors. Short groups are
    padded by repeating the first found index; a center with no in-radius
    point falls back to its nearest point (lowest index on exact ties)
    repeated max_neighbors times.

    Args:
        centers: (M, 3)
        points: (N, 3), N >= 1
        radius: float > 0
        max_neighbors: T >= 1
    Returns:
        (M, T) int64 indices, and (M,) int64 count of genuine in-radius hits
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("ball_query: empty point set")
    if radius <= 0 or max_neighbors < 1:
        raise ValueError("ball_query: radius and max_neighbors must be positive")
    m, n = centers.shape[0], pts.shape[0]
    idx = np.zeros((m, max_neighbors), dtype=np.int64)
    counts = np.zeros(m, dtype=np.int64)
    r2 = float(radius) ** 2
    # chunk the distance matrix to keep memory flat on large scenes
    chunk = max(1, int(4_000_000 // max(n, 1)))
    for lo in range(0, m, chunk):
        hi = min(m, lo + chunk)
        d2 = np.sum((centers[lo:hi, None, :] - pts[None, :, :]) ** 2, axis=2)
        within = d2 <= r2
        for r in range(lo, hi):
            hits = np.flatnonzero(within[r - lo])
            if hits.size == 0:
                idx[r, :] = int(np.argmin(d2[r - lo]))
                continue
            take = hits[:max_neighbors]
            counts[r] = take.size
            idx[r, : take.size] = take
            if take.size < max_neighbors:
                idx[r, take.size :] = take[0]
    return idx, counts


def three_nn_interpolate(query_xyz, source_xyz, source_feats, eps=1e-8):
    """Inverse-distance interpolation from up to three nearest sources.

    Weights are 1 / (d + eps), normalized to sum to one.

    Args:
        query_xyz: (M, 3)
        source_xyz: (N, 3), N >= 1
        source_feats: (N, C)
    Returns:
        (M, C) interpolated features
    """
    q = np.asarray(query_xyz, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(source_xyz, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(source_feats, dtype=np.float64)
    if s.shape[0] == 0:
        raise ValueError("three_nn_interpolate: empty source set")
    k = min(3, s.shape[0])
    out = np.empty((q.shape[0], f.shape[1]))
    chunk = max(1, int(4_000_000 // max(s.shape[0], 1)))
    for lo in range(0, q.shape[0], chunk):
        hi = min(q.shape[0], lo + chunk)
        d2 = np.sum((q[lo:hi, None, :] - s[None, :, :]) ** 2, axis=2)
        nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
        d = np.sqrt(np.take_along_axis(d2, nn, axis=1))
        w = 1.0 / (d + eps)
        w /= w.sum(axis=1, keepdims=True)
        out[lo:hi] = np.einsum("mk,mkc->mc", w, f[nn])
    return out


# ============================ RoI-aware pooling ============================


@dataclass
class PooledPointGrid:
    """Canonical-frame point grid pooled from a box: r_p**3 cells.

    cell_means holds the mean canonical point of each cell (zeros when
    empty); occupancy marks the non-empty cells. Cells are ordered
    row-major over (ix, iy, iz).
    """

    resolution: int
    cell_means: np.ndarray
    occupancy: np.ndarray

    @property
    def matrix(self):
        """The flattened (r_p**3, 3) input matrix for the shape network."""
        return self.cell_means


def _cell_index(coord, half, n_cells):
    """Cell index along one axis; exact internal boundaries resolve downward.

    Uses ceil((c + half) / cell) - 1 so the bottom face lands in cell 0
    and the top face in cell n-1 without extra clamping; a point exactly
    between two cells joins the lower one.
    """
    cell = 2.0 * half / n_cells
    idx = np.ceil((coord + half) / cell).astype(np.int64) - 1
    return np.clip(idx, 0, n_cells - 1)


def roi_aware_pool(points, box, resolution=12):
    """Bucket the points inside a box into a regular canonical grid.

    Args:
        points: (N, 3) world frame
        box: Box7
        resolution: cells per axis (r_p)
    Returns:
        PooledPointGrid with resolution**3 cells
    """
    if resolution < 1:
        raise ValueError("roi_aware_pool: resolution must be >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    local = to_canonical(pts, box)
    inside = (
        (np.abs(local[:, 0]) <= 0.5 * box.l)
        & (np.abs(local[:, 1]) <= 0.5 * box.w)
        & (np.abs(local[:, 2]) <= 0.5 * box.h)
    )
    local = local[inside]
    n = resolution
    means = np.zeros((n * n * n, 3))
    occ = np.zeros(n * n * n, dtype=bool)
    if local.shape[0]:
        ix = _cell_index(local[:, 0], 0.5 * box.l, n)
        iy = _cell_index(local[:, 1], 0.5 * box.w, n)
        iz = _cell_index(local[:, 2], 0.5 * box.h, n)
        flat = (ix * n + iy) * n + iz
        sums = np.zeros((n * n * n, 3))
        np.add.at(sums, flat, local)
        counts = np.bincount(flat, minlength=n * n * n).astype(np.float64)
        occ = counts > 0
        means[occ] = sums[occ] / counts[occ, None]
    return PooledPointGrid(resolution=n, cell_means=means, occupancy=occ)


# ============================ shared PointNet unit ============================


def pointnet_unit(groups, layers):
    """Per-point MLP followed by max pooling over each group.

    Args:
        groups: (G, T, C_in) grouped inputs
        layers: list of (W (C_out, C_in), b (C_out,)) applied with ReLU
            between layers and after the last, before pooling
    Returns:
        (G, C_out) pooled features
    """
    g, t, c = groups.shape
    x = groups.reshape(g * t, c)
    for w, b in layers:
        x = np.maximum(x @ w.T + b, 0.0)
    return x.reshape(g, t, -1).max(axis=1)


def _mlp_init(rng, widths):
    layers = []
    for c_in, c_out in zip(widths[:-1], widths[1:]):
        bound = 1.0 / np.sqrt(c_in)
        layers.append((rng.uniform(-bound, bound, size=(c_out, c_in)),
                       rng.uniform(-bound, bound, size=(c_out,))))
    return layers


# ============================ multi-scale grouping ============================


@dataclass
class MsgConfig:
    """Two-radius grouping over a point set summarized into one vector."""

    n_centers: int = 128
    max_neighbors: int = 16
    radii: tuple = (0.2, 0.4)
    channels: int = 128
    hidden: int = 64


@dataclass
class MsgParams:
    scale_layers: list
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    @classmethod
    def create(cls, cfg, rng):
        scale_layers = [_mlp_init(rng, (3, cfg.hidden, cfg.channels)) for _ in cfg.radii]
        fan_in = cfg.n_centers * cfg.channels * len(cfg.radii)
        bound = 1.0 / np.sqrt(fan_in)
        return cls(
            scale_layers=scale_layers,
            fc_weight=rng.uniform(-bound, bound, size=(cfg.channels, fan_in)),
            fc_bias=rng.uniform(-bound, bound, size=(cfg.channels,)),
        )


def msg_extract(points, cfg, params):
    """Structure summary of a point set via multi-scale grouping.

    Points are sorted lexicographically, FPS picks n_centers of them, and
    each center is grouped at every radius. Relative coordinates feed a
    per-scale PointNet unit; per-center features from all scales are
    concatenated and one fully connected layer maps the flattened
    (n_centers x channels x n_scales) tensor to a single vector.

    Args:
        points: (N, 3), N >= n_centers
        cfg: MsgConfig
        params: MsgParams
    Returns:
        (channels,) float64 structure vector
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < cfg.n_centers:
        raise ValueError("msg_extract: fewer points than centers")
    # canonical ordering makes the result permutation invariant
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    pts = pts[order]
    centers = pts[farthest_point_sample(pts, cfg.n_centers)]
    per_scale = []
    for radius, layers in zip(cfg.radii, params.scale_layers):
        idx, _ = ball_query(centers, pts, radius, cfg.max_neighbors)
        rel = pts[idx] - centers[:, None, :]
        per_scale.append(pointnet_unit(rel, layers))
    stacked = np.concatenate(per_scale, axis=1)  # (m, channels * n_scales)
    return stacked.reshape(-1) @ params.fc_weight.T + params.fc_bias


# ============================ RoI-grid pooling ============================


@dataclass
class GridPoolConfig:
    """6x6x6 grid points per box, grouped over keypoints at two radii."""

    grid_size: int = 6
    radii: tuple = (0.8, 1.6)
    max_neighbors: int = 16
    channels: int = 128  # concatenated over scales


@dataclass
class GridPoolParams:
    scale_layers: list

    @classmethod
    def create(cls, cfg, keypoint_channels, rng):
        per_scale = cfg.channels // len(cfg.radii)
        return cls(scale_layers=[
            _mlp_init(rng, (3 + keypoint_channels, per_scale, per_scale)) for _ in cfg.radii
        ])


@dataclass
class GridPointFeatures:
    """(grid_size**3, channels) pooled features plus grid point locations."""

    grid_points: np.ndarray
    features: np.ndarray
    used_fallback: bool


def roi_grid_pool(box, keypoint_xyz, keypoint_feats, cfg, params):
    """Aggregate keypoint features at uniform grid points inside a box.

    Grid points are the centers of a grid_size**3 subdivision of the box,
    mapped to world coordinates. Each grid point ball-queries the
    keypoints at every radius; (relative offset, keypoint feature) pairs
    run through a per-scale PointNet unit and scales are concatenated.
    When a grid point has no in-radius keypoint its group falls back to
    the nearest keypoint and the output is flagged.

    Args:
        box: Box7
        keypoint_xyz: (K, 3), K >= 1
        keypoint_feats: (K, C)
        cfg: GridPoolConfig
        params: GridPoolParams
    Returns:
        GridPointFeatures with (grid_size**3, channels) features
    """
    g = cfg.grid_size
    lin = (np.arange(g) + 0.5) / g - 0.5
    gx, gy, gz = np.meshgrid(lin * box.l, lin * box.w, lin * box.h, indexing="ij")
    local = np.stack([gx.reshape(-1), gy.reshape(-1), gz.reshape(-1)], axis=1)
    grid_world = from_canonical(local, box)
    kp = np.asarray(keypoint_xyz, dtype=np.float64).reshape(-1, 3)
    kf = np.asarray(keypoint_feats, dtype=np.float64)
    per_scale = []
    fallback = False
    for radius, layers in zip(cfg.radii, params.scale_layers):
        idx, counts = ball_query(grid_world, kp, radius, cfg.max_neighbors)
        fallback = fallback or bool((counts == 0).any())
        rel = kp[idx] - grid_world[:, None, :]
        grouped = np.concatenate([rel, kf[idx]], axis=2)
        per_scale.append(pointnet_unit(grouped, layers))
    feats = np.concatenate(per_scale, axis=1)
    return GridPointFeatures(grid_points=grid_world, features=feats, used_fallback=fallback)


# ============================ keypoint branch ============================


@dataclass
class VsaParams:
    """Per-level set abstraction weights for keypoint feature gathering."""

    level_layers: list
    radii: tuple
    max_neighbors: int

    @classmethod
    def create(cls, level_channels, rng, radii=(0.4, 0.8, 1.6, 3.2), max_neighbors=16, out_each=32):
        layers = [_mlp_init(rng, (3 + c, out_each, out_each)) for c in level_channels]
        return cls(level_layers=layers, radii=tuple(radii), max_neighbors=max_neighbors)


def vsa_aggregate(keypoint_xyz, levels, params):
    """Gather multi-level voxel features onto keypoints.

    Args:
        keypoint_xyz: (K, 3)
        levels: list of (centers (N_l, 3), feats (N_l, C_l)) per backbone level
        params: VsaParams with one radius and MLP per level
    Returns:
        (K, sum(out_each)) concatenated keypoint features
    """
    outs = []
    for (centers, feats), radius, layers in zip(levels, params.radii, params.level_layers):
        if centers.shape[0] == 0:
            outs.append(np.zeros((keypoint_xyz.shape[0], layers[-1][0].shape[0])))
            continue
        idx, _ = ball_query(keypoint_xyz, centers, radius, params.max_neighbors)
        rel = centers[idx] - keypoint_xyz[:, None, :]
        grouped = np.concatenate([rel, feats[idx]], axis=2)
        outs.append(pointnet_unit(grouped, layers))
    return np.concatenate(outs, axis=1)


@dataclass
class KeypointAttention:
    """Two stacked linear maps (C -> C/2 -> 1) ending in a sigmoid gate."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def create(cls, channels, rng):
        half = max(channels // 2, 1)
        b1 = 1.0 / np.sqrt(channels)
        b2 = 1.0 / np.sqrt(half)
        return cls(
            w1=rng.uniform(-b1, b1, size=(half, channels)),
            b1=rng.uniform(-b1, b1, size=(half,)),
            w2=rng.uniform(-b2, b2, size=(1, half)),
            b2=rng.uniform(-b2, b2, size=(1,)),
        )


def reweight_keypoints(feats, attn):
    """Scale each keypoint feature row by its learned (0, 1) weight.

    Returns (reweighted_feats, weights); weights come from
    sigmoid(w2 @ relu(w1 @ f + b1) + b2) per keypoint.
    """
    h = np.maximum(feats @ attn.w1.T + attn.b1, 0.0)
    logit = h @ attn.w2.T + attn.b2
    wgt = 1.0 / (1.0 + np.exp(-logit))
    return feats * wgt, wgt.reshape(-1)
