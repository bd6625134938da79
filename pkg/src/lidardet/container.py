"""A tiny binary container for sequences of 3-D point sets.

Layout (all little-endian):
    magic "PTSC1\\n" | uint32 set_count | per set: uint32 n | n * 3 float32

The shape corpus stores pairs as alternating (partial, complete) sets;
the ground-truth database stores one set per object crop. Writing the
same arrays always produces identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

__all__ = ["write_point_sets", "read_point_sets"]

_MAGIC = b"PTSC1\n"


def write_point_sets(path, point_sets):
    """Write a list of (n_i, 3) arrays as float32 triples."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(point_sets)))
        for pts in point_sets:
            arr = np.ascontiguousarray(np.asarray(pts, dtype=np.float64).reshape(-1, 3), dtype="<f4")
            fh.write(struct.pack("<I", arr.shape[0]))
            fh.write(arr.tobytes())


def read_point_sets(path):
    """Read back a list of (n_i, 3) float64 arrays (values are float32-exact)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a point set container (bad magic)")
    off = len(_MAGIC)
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        arr = np.frombuffer(blob, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
        off += 12 * n
        out.append(arr.astype(np.float64))
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} unexpected trailing bytes")
    return out
