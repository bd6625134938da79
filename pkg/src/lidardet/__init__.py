"""LiDAR 3D object detection toolkit.

A numpy implementation of a two-stage point cloud detector: sparse
voxel convolution backbone, keypoint feature aggregation, RoI pooling
with shape completion, detection losses on a minimal autodiff tape, and
KITTI-style evaluation. Everything is seeded and deterministic so the
whole pipeline can be exercised by exact tests on one CPU.
"""

from .geometry import Box7, bev_iou, iou3d, iou_one_to_many, normalize_angle
from .voxel import GridSpec, SparseConvBackbone, SparseVoxelTensor, voxelize

__version__ = "0.1.0"

__all__ = [
    "Box7",
    "GridSpec",
    "SparseConvBackbone",
    "SparseVoxelTensor",
    "bev_iou",
    "iou3d",
    "iou_one_to_many",
    "normalize_angle",
    "voxelize",
    "__version__",
]
