"""Voxelization and sparse 3-D convolution on active sites only.

Coordinates are integer (z, y, x) triples over a fixed grid. A sparse
tensor stores one row of features per active voxel, sorted by linearized
coordinate so every structure here has a single deterministic layout.
Convolutions are driven by a rulebook: for each kernel offset, the list
of (input_row, output_row) pairs it connects. Applying the convolution
is then gather, one GEMM per offset, scatter-add.

Conventions match a dense convolution with kernel 3, padding 1:
submanifold layers keep the input's active sites; strided layers place
an output at o when some active input sits at stride*o + k - 1 for a
kernel offset k, which halves each grid dimension per stride-2 stage.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "SparseVoxelTensor",
    "voxelize",
    "Rulebook",
    "build_rulebook_submanifold",
    "build_rulebook_strided",
    "sparse_conv_apply",
    "voxel_centers",
    "SparseConvBackbone",
    "dump_voxels_csv",
]


@dataclass
class GridSpec:
    """Axis-aligned voxel grid: world range and per-axis voxel size (x, y, z order)."""

    range_min: tuple = (0.0, -40.0, -3.0)
    range_max: tuple = (70.4, 40.0, 1.0)
    voxel_size: tuple = (0.05, 0.05, 0.1)

    def __post_init__(self):
        lo = np.asarray(self.range_min, dtype=np.float64)
        hi = np.asarray(self.range_max, dtype=np.float64)
        vs = np.asarray(self.voxel_size, dtype=np.float64)
        if not (hi > lo).all():
            raise ValueError("GridSpec: range_max must exceed range_min on every axis")
        if not (vs > 0).all():
            raise ValueError("GridSpec: voxel sizes must be positive")
        self.range_min = tuple(float(v) for v in lo)
        self.range_max = tuple(float(v) for v in hi)
        self.voxel_size = tuple(float(v) for v in vs)

    @property
    def dims_xyz(self):
        """Number of voxels along (x, y, z)."""
        lo = np.asarray(self.range_min)
        hi = np.asarray(self.range_max)
        vs = np.asarray(self.voxel_size)
        return tuple(int(v) for v in np.floor((hi - lo) / vs + 1e-9))

    @property
    def dims_zyx(self):
        nx, ny, nz = self.dims_xyz
        return (nz, ny, nx)


def _linear_keys(coords, dims_zyx):
    nz, ny, nx = dims_zyx
    return (coords[:, 0].astype(np.int64) * ny + coords[:, 1]) * nx + coords[:, 2]


@dataclass
class SparseVoxelTensor:
    """Active voxel coordinates (N, 3) as (z, y, x) plus features (N, C).

    Rows are sorted by linearized (z, y, x) coordinate; construction
    enforces the order so downstream code can binary-search coordinates.
    """

    coords: np.ndarray
    features: np.ndarray
    dims_zyx: tuple

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(self.coords.shape[0], -1)
        keys = _linear_keys(self.coords, self.dims_zyx)
        if keys.size and not (np.diff(keys) > 0).all():
            order = np.argsort(keys, kind="stable")
            self.coords = self.coords[order]
            self.features = self.features[order]
            keys = keys[order]
            if (np.diff(keys) == 0).any():
                raise ValueError("SparseVoxelTensor: duplicate coordinates")

    @property
    def n_active(self):
        return self.coords.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]


def voxelize(points, grid):
    """Average points into voxels.

    Points outside the grid range are dropped. Every surviving point is
    binned by floor((p - range_min) / voxel_size) and each non-empty
    voxel's feature is the mean of its points' (x, y, z, reflectance).

    Args:
        points: (N, 4) [x, y, z, reflectance]
        grid: GridSpec
    Returns:
        SparseVoxelTensor with 4 channels
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    lo = np.asarray(grid.range_min)
    vs = np.asarray(grid.voxel_size)
    nx, ny, nz = grid.dims_xyz
    idx = np.floor((pts[:, :3] - lo) / vs).astype(np.int64)
    keep = (
        (idx[:, 0] >= 0) & (idx[:, 0] < nx)
        & (idx[:, 1] >= 0) & (idx[:, 1] < ny)
        & (idx[:, 2] >= 0) & (idx[:, 2] < nz)
    )
    pts = pts[keep]
    idx = idx[keep]
    if pts.shape[0] == 0:
        return SparseVoxelTensor(np.zeros((0, 3), np.int64), np.zeros((0, 4)), grid.dims_zyx)
    coords = idx[:, ::-1]  # (z, y, x)
    keys = _linear_keys(coords, grid.dims_zyx)
    uniq, inverse = np.unique(keys, return_inverse=True)
    sums = np.zeros((uniq.size, 4))
    np.add.at(sums, inverse, pts)
    counts = np.bincount(inverse, minlength=uniq.size).astype(np.float64)
    feats = sums / counts[:, None]
    nz_, ny_, nx_ = grid.dims_zyx
    zz = uniq // (ny_ * nx_)
    yy = (uniq // nx_) % ny_
    xx = uniq % nx_
    out_coords = np.stack([zz, yy, xx], axis=1)
    return SparseVoxelTensor(out_coords, feats, grid.dims_zyx)


# ============================ rulebooks ============================


@dataclass
class Rulebook:
    """Connectivity of one sparse convolution layer.

    pairs[k] holds (input_rows, output_rows) for kernel offset k, where k
    enumerates the 3x3x3 offsets as (kz, ky, kx) in row-major order.
    Within one offset every output row appears at most once, so the
    scatter in sparse_conv_apply never collides.
    """

    kernel_size: int
    stride: int
    in_dims_zyx: tuple
    out_dims_zyx: tuple
    out_coords: np.ndarray
    pairs: list = field(default_factory=list)

    @property
    def n_pairs(self):
        return int(sum(p[0].size for p in self.pairs))


def _lookup(sorted_keys, query_keys):
    """Positions of query_keys in sorted_keys, -1 where absent."""
    pos = np.searchsorted(sorted_keys, query_keys)
    pos_c = np.clip(pos, 0, max(sorted_keys.size - 1, 0))
    found = (sorted_keys.size > 0) & (sorted_keys[pos_c] == query_keys)
    return np.where(found, pos_c, -1)


def build_rulebook_submanifold(tensor, kernel_size=3):
    """Rulebook for a submanifold convolution: outputs exactly at the input sites.

    For output site j and offset k (as a signed displacement k-1 per axis)
    the pair (i, j) exists when the voxel at coords[j] + (k-1) is active.
    """
    if kernel_size != 3:
        raise ValueError("only kernel_size 3 is supported")
    coords = tensor.coords
    dims = tensor.dims_zyx
    keys = _linear_keys(coords, dims)
    pairs = []
    rows = np.arange(coords.shape[0])
    for off in itertools.product((-1, 0, 1), repeat=3):
        cand = coords + np.asarray(off, dtype=np.int64)
        ok = (
            (cand[:, 0] >= 0) & (cand[:, 0] < dims[0])
            & (cand[:, 1] >= 0) & (cand[:, 1] < dims[1])
            & (cand[:, 2] >= 0) & (cand[:, 2] < dims[2])
        )
        hit = np.full(coords.shape[0], -1, dtype=np.int64)
        if ok.any():
            hit[ok] = _lookup(keys, _linear_keys(cand[ok], dims))
        m = hit >= 0
        pairs.append((hit[m], rows[m]))
    return Rulebook(3, 1, dims, dims, coords.copy(), pairs)


def build_rulebook_strided(tensor, kernel_size=3, stride=2):
    """Rulebook for a strided sparse convolution (kernel 3, padding 1).

    Output sites are the floor-divided input coordinates: each active
    input at c claims the site c // stride, and duplicates collapse.
    A pair (i, j) then exists for every kernel offset k with
    coords[i] == stride * out_coords[j] + k - 1 componentwise, so the
    feature at each output site matches the dense strided convolution
    evaluated there.
    """
    if kernel_size != 3:
        raise ValueError("only kernel_size 3 is supported")
    coords = tensor.coords
    dims = np.asarray(tensor.dims_zyx, dtype=np.int64)
    out_dims = tuple(int(v) for v in (dims - 1) // stride + 1)
    site_keys = np.unique(_linear_keys(coords // stride, out_dims))
    nz, ny, nx = out_dims
    out_coords = np.stack(
        [site_keys // (ny * nx), (site_keys // nx) % ny, site_keys % nx], axis=1)
    pairs = []
    rows = np.arange(coords.shape[0])
    for off in itertools.product((0, 1, 2), repeat=3):
        numer = coords + 1 - np.asarray(off, dtype=np.int64)
        ok = (numer % stride == 0).all(axis=1)
        o = numer // stride
        ok &= (o >= 0).all(axis=1)
        ok &= (o[:, 0] < out_dims[0]) & (o[:, 1] < out_dims[1]) & (o[:, 2] < out_dims[2])
        hit = np.full(coords.shape[0], -1, dtype=np.int64)
        if ok.any():
            hit[ok] = _lookup(site_keys, _linear_keys(o[ok], out_dims))
        m = hit >= 0
        pairs.append((rows[m], hit[m]))
    return Rulebook(3, stride, tensor.dims_zyx, out_dims, out_coords, pairs)


def sparse_conv_apply(rulebook, features, weights, bias=None):
    """Run one sparse convolution given its rulebook.

    Args:
        rulebook: Rulebook
        features: (N_in, C_in) input features
        weights: (27, C_in, C_out) kernel, offsets in (kz, ky, kx) row-major order
        bias: optional (C_out,)
    Returns:
        (N_out, C_out) output features aligned with rulebook.out_coords
    """
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != 27 or weights.shape[1] != features.shape[1]:
        raise ValueError("sparse_conv_apply: weights must be (27, C_in, C_out)")
    n_out = rulebook.out_coords.shape[0]
    out = np.zeros((n_out, weights.shape[2]))
    for k, (ii, jj) in enumerate(rulebook.pairs):
        if ii.size:
            # within an offset each output row occurs once, so += is safe
            out[jj] += features[ii] @ weights[k]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out


def voxel_centers(coords, grid, level_stride=1):
    """World-frame centers of voxels at a given downsampling stride.

    A voxel at level coordinate c covers level cells of size
    voxel_size * level_stride starting at range_min; its center is the
    middle of that cell.

    Args:
        coords: (N, 3) integer (z, y, x)
        grid: GridSpec of the stride-1 grid
        level_stride: 1, 2, 4, ...
    Returns:
        (N, 3) float64 xyz centers
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    lo = np.asarray(grid.range_min)
    vs = np.asarray(grid.voxel_size) * float(level_stride)
    xyz = coords[:, ::-1]
    return lo + (xyz + 0.5) * vs


# ============================ backbone ============================


def _he_weights(rng, c_in, c_out):
    return rng.normal(0.0, 1.0 / np.sqrt(27.0 * c_in), size=(27, c_in, c_out))


class SparseConvBackbone:
    """Four-stage sparse convolutional encoder over a voxelized scene.

    Stage 1 keeps full resolution; stages 2-4 each open with a stride-2
    convolution, so the deepest feature map is 8x downsampled per axis.
    Every stage follows its entry convolution with two submanifold
    convolutions. Features pass through ReLU between layers. Weights are
    drawn once from a seeded generator; this encoder provides
    deterministic plumbing and feature geometry, not trained features.
    """

    CHANNEL_PLAN = (16, 32, 64, 64)
    STRIDES = (1, 2, 2, 2)

    def __init__(self, grid, in_channels=4, rng=None, channel_plan=None):
        self.grid = grid
        self.channel_plan = tuple(channel_plan or self.CHANNEL_PLAN)
        rng = rng or np.random.default_rng(0)
        self.weights = []
        c_prev = in_channels
        for c_out in self.channel_plan:
            stage = {
                "entry": (_he_weights(rng, c_prev, c_out), np.zeros(c_out)),
                "subm1": (_he_weights(rng, c_out, c_out), np.zeros(c_out)),
                "subm2": (_he_weights(rng, c_out, c_out), np.zeros(c_out)),
            }
            self.weights.append(stage)
            c_prev = c_out

    def forward(self, tensor):
        """Returns a list of four (SparseVoxelTensor, level_stride) tuples."""
        levels = []
        cur = tensor
        stride_acc = 1
        for stage_w, stride in zip(self.weights, self.STRIDES):
            if stride == 1:
                rb = build_rulebook_submanifold(cur)
            else:
                rb = build_rulebook_strided(cur, stride=stride)
                stride_acc *= stride
            w, b = stage_w["entry"]
            feats = np.maximum(sparse_conv_apply(rb, cur.features, w, b), 0.0)
            cur = SparseVoxelTensor(rb.out_coords, feats, rb.out_dims_zyx)
            for name in ("subm1", "subm2"):
                rb2 = build_rulebook_submanifold(cur)
                w, b = stage_w[name]
                feats = np.maximum(sparse_conv_apply(rb2, cur.features, w, b), 0.0)
                cur = SparseVoxelTensor(cur.coords, feats, cur.dims_zyx)
            levels.append((cur, stride_acc))
        return levels


def dump_voxels_csv(path, tensor):
    """Debug dump: one `z,y,x,f0,f1,...` line per active voxel, deterministic order."""
    with open(path, "w") as fh:
        cols = ",".join(f"f{i}" for i in range(tensor.n_channels))
        fh.write(f"z,y,x,{cols}\n")
        for coord, feat in zip(tensor.coords, tensor.features):
            vals = ",".join(repr(float(v)) for v in feat)
            fh.write(f"{coord[0]},{coord[1]},{coord[2]},{vals}\n")
