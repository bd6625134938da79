"""Sparse 3D convolution: voxelize a shell, build rulebooks, downsample.

Active voxels are stored as (z, y, x) coordinate rows plus feature rows.
A rulebook enumerates every (input site, kernel offset, output site)
triple once; applying it is 27 gathers, matmuls, and scatter-adds.
Submanifold convolutions keep the active set fixed, stride-2
convolutions floor-divide the occupied sites, and the four-stage
backbone stacks both.
"""

import numpy as np

from lidardet.voxel import (
    GridSpec,
    SparseConvBackbone,
    build_rulebook_strided,
    build_rulebook_submanifold,
    sparse_conv_apply,
    voxel_centers,
    voxelize,
)

rng = np.random.default_rng(0)

# --- 1. points on a spherical shell -> sparse voxel tensor -----------------
grid = GridSpec(range_min=(0.0, -4.0, -4.0), range_max=(8.0, 4.0, 4.0),
                voxel_size=(0.1, 0.1, 0.1))
direc = rng.normal(size=(4000, 3))
direc /= np.linalg.norm(direc, axis=1, keepdims=True)
xyz = direc * 2.5 + np.array([4.0, 0.0, 0.0])
points = np.concatenate([xyz, rng.uniform(0, 1, size=(4000, 1))], axis=1)

tensor = voxelize(points, grid)
total_cells = int(np.prod(tensor.dims_zyx))
print(f"grid dims (z, y, x) = {tensor.dims_zyx}, {total_cells} cells")
print(f"{points.shape[0]} points -> {tensor.coords.shape[0]} active voxels "
      f"({100.0 * tensor.coords.shape[0] / total_cells:.3f}% occupancy)")
print(f"per-voxel feature = mean (x, y, z, r): first row {np.round(tensor.features[0], 3)}")

# --- 2. submanifold convolution preserves the active set -------------------
rb = build_rulebook_submanifold(tensor)
print(f"\nsubmanifold rulebook: {rb.n_pairs} gather/scatter pairs over "
      f"{tensor.coords.shape[0]} sites "
      f"(dense would touch {27 * tensor.coords.shape[0]})")
w = rng.normal(size=(27, tensor.features.shape[1], 8)) * 0.1
feats = sparse_conv_apply(rb, tensor.features, w)
print(f"output sites == input sites: "
      f"{np.array_equal(rb.out_coords, tensor.coords)}, "
      f"features now {feats.shape}")

# --- 3. stride-2 convolution halves each axis -------------------------------
rb2 = build_rulebook_strided(tensor, stride=2)
print(f"\nstride-2: {tensor.coords.shape[0]} sites -> "
      f"{rb2.out_coords.shape[0]} sites, dims {tensor.dims_zyx} -> "
      f"{rb2.out_dims_zyx}")
centers = voxel_centers(rb2.out_coords, grid, level_stride=2)
print(f"coarse voxel centers span x in [{centers[:, 0].min():.2f}, "
      f"{centers[:, 0].max():.2f}] (shell diameter 5.0)")

# --- 4. the four-stage backbone: 1x, 2x, 4x, 8x ----------------------------
backbone = SparseConvBackbone(grid, in_channels=tensor.features.shape[1],
                              rng=np.random.default_rng(7))
levels = backbone.forward(tensor)
print("\nbackbone levels (active sites, channels, stride):")
for level, stride in levels:
    print(f"  stride {stride}: {level.coords.shape[0]:5d} sites x "
          f"{level.features.shape[1]} channels, dims {level.dims_zyx}")
