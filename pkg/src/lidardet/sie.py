"""Shape completion and feature fusion for second-stage box refinement.

The shape network is a small completion model over pooled point grids:
a per-point encoder pools to a 256-long summary v, v is re-attached to
every per-point feature, a second encoder pools to a 1024-long global
code g, and a decoder expands g to a fixed cloud of 1024 canonical-frame
points. Chamfer distance supervises it. The fusion step concatenates
grid-pooled scene features with the predicted shape's structure vector
and rescales the result with an attention map built from both poolings.

Training here is deliberately desk-scale: a synthetic corpus of cuboid
and ellipsoid shells with an azimuthal sector removed stands in for real
object crops, small enough that the whole loop runs in minutes on a CPU.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import read_point_sets, write_point_sets
from .geometry import Box7
from .pointops import roi_aware_pool

__all__ = [
    "ShapePredictor",
    "PredictedShape",
    "shape_forward",
    "predict_shape",
    "chamfer_distance",
    "FusionState",
    "fuse_attention",
    "make_shape_corpus",
    "save_corpus",
    "load_corpus",
    "ShapeTrainConfig",
    "train_shape_net",
    "holdout_chamfer",
    "CORPUS_BOX",
]

# canonical pooling box for corpus shapes (unit cube at the origin)
CORPUS_BOX = Box7(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)


# ============================ shape network ============================


@dataclass
class ShapePredictor:
    """Completion network: two pooled encoders and a fixed-size decoder.

    Channel plan (defaults): per-point 3 -> 128 -> 256, pooled summary v
    (256); concat of per-point features with v -> 512 -> 512 -> 1024,
    pooled global code g (1024); decoder 1024 -> 1024 -> 3 * n_out.
    """

    enc1_l1: ad.LinearLayer
    enc1_l2: ad.LinearLayer
    enc2_l1: ad.LinearLayer
    enc2_l2: ad.LinearLayer
    dec_l1: ad.LinearLayer
    dec_l2: ad.LinearLayer
    n_out: int = 1024

    @classmethod
    def create(cls, rng, point_hidden=128, point_channels=256, global_hidden=512,
               global_channels=1024, decoder_hidden=1024, n_out=1024):
        return cls(
            enc1_l1=ad.linear_layer_init(3, point_hidden, rng),
            enc1_l2=ad.linear_layer_init(point_hidden, point_channels, rng),
            enc2_l1=ad.linear_layer_init(2 * point_channels, global_hidden, rng),
            enc2_l2=ad.linear_layer_init(global_hidden, global_channels, rng),
            dec_l1=ad.linear_layer_init(global_channels, decoder_hidden, rng),
            dec_l2=ad.linear_layer_init(decoder_hidden, 3 * n_out, rng),
            n_out=n_out,
        )

    def layers(self):
        return {
            "enc1.l1": self.enc1_l1,
            "enc1.l2": self.enc1_l2,
            "enc2.l1": self.enc2_l1,
            "enc2.l2": self.enc2_l2,
            "dec.l1": self.dec_l1,
            "dec.l2": self.dec_l2,
        }

    def params(self):
        out = []
        for layer in self.layers().values():
            out.extend(layer.params())
        return out

    def param_dict(self):
        d = {}
        for name, layer in self.layers().items():
            d[f"{name}.weight"] = layer.weight
            d[f"{name}.bias"] = layer.bias
        return d

    def load_param_dict(self, arrays):
        for name, tensor in self.param_dict().items():
            if name not in arrays:
                raise ValueError(f"checkpoint is missing parameter {name}")
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"parameter {name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data[...] = arr


@dataclass
class PredictedShape:
    """Completed object surface: (n_out, 3) canonical-frame points."""

    points: np.ndarray


def shape_forward(net, x, n_segments=1):
    """Tape forward pass of the shape network.

    Args:
        net: ShapePredictor
        x: Tensor or ndarray of stacked input points, (S*n, 3) for S
            samples of n points each
        n_segments: S; pooling happens per contiguous segment
    Returns:
        Tensor of shape (S, 3 * n_out) decoded clouds, one row per sample
    """
    x = ad.as_tensor(x)
    rows = x.data.shape[0]
    if rows % n_segments != 0:
        raise ValueError("shape_forward: rows not divisible by n_segments")
    n = rows // n_segments
    h = ad.relu(ad.linear(x, net.enc1_l1))
    per_point = ad.linear(h, net.enc1_l2)  # (S*n, 256)
    v = ad.segment_max_pool(per_point, n_segments)  # (S, 256)
    joined = ad.concat([per_point, ad.expand_segments(v, n)], axis=1)  # (S*n, 512)
    h2 = ad.relu(ad.linear(joined, net.enc2_l1))
    pre_g = ad.linear(h2, net.enc2_l2)  # (S*n, 1024)
    g = ad.segment_max_pool(pre_g, n_segments)  # (S, 1024)
    d = ad.relu(ad.linear(g, net.dec_l1))
    return ad.linear(d, net.dec_l2)  # (S, 3 * n_out)


def predict_shape(grid, net):
    """Complete a pooled point grid into a fixed-size canonical cloud.

    Args:
        grid: PooledPointGrid (or any object with a (n, 3) .matrix)
        net: ShapePredictor
    Returns:
        PredictedShape with (n_out, 3) points
    """
    out = shape_forward(net, np.asarray(grid.matrix, dtype=np.float64), 1)
    return PredictedShape(points=out.data.reshape(net.n_out, 3).copy())


# ============================ chamfer distance ============================


def _nearest_rows(a, b):
    """Index of each a row's nearest b row (squared Euclidean, first min on ties)."""
    d2 = a @ (b.T * -2.0)
    d2 += np.einsum("ij,ij->i", a, a)[:, None]
    d2 += np.einsum("ij,ij->i", b, b)[None, :]
    return np.argmin(d2, axis=1)


def _chamfer_parts(a, b):
    """Nearest-neighbor indices both ways; row-major argmin in each direction."""
    return _nearest_rows(a, b), _nearest_rows(b, a)


def _chamfer_value(a, b, nn_ab, nn_ba):
    da = a - b[nn_ab]
    db = b - a[nn_ba]
    return np.sum(da * da, axis=1).mean() + np.sum(db * db, axis=1).mean()


def chamfer_distance(a, b):
    """Symmetric chamfer distance between two point sets.

    mean over a of the squared distance to its nearest b, plus the same
    with roles swapped. Accepts Tensors or arrays; gradients flow to any
    Tensor argument. Returns a scalar Tensor.
    """
    ta = ad.as_tensor(a)
    tb = ad.as_tensor(b)
    pa = ta.data.reshape(-1, 3)
    pb = tb.data.reshape(-1, 3)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer_distance: point sets must be non-empty")
    nn_ab, nn_ba = _chamfer_parts(pa, pb)
    val = _chamfer_value(pa, pb, nn_ab, nn_ba)
    out = Tensor(np.array(val), ta.requires_grad or tb.requires_grad, (ta, tb))
    n, m = pa.shape[0], pb.shape[0]

    def backward(g):
        s = float(g)
        if ta.requires_grad:
            ga = (2.0 / n) * (pa - pb[nn_ab])
            np.add.at(ga, nn_ba, (2.0 / m) * (pa[nn_ba] - pb))
            ta._accumulate((s * ga).reshape(ta.data.shape))
        if tb.requires_grad:
            gb = (2.0 / m) * (pb - pa[nn_ba])
            np.add.at(gb, nn_ab, (2.0 / n) * (pb[nn_ab] - pa))
            tb._accumulate((s * gb).reshape(tb.data.shape))

    out._backward = backward
    return out


def mean_chamfer(pred_flat, targets):
    """Mean chamfer distance of a batch of decoded clouds against targets.

    Nearest-neighbor selection uses float32 distances (a training-speed
    concession); the returned value and gradients are float64 exact for
    the selected pairings.

    Args:
        pred_flat: Tensor (S, 3 * n_out), rows are flattened clouds
        targets: sequence of S (M_i, 3) arrays
    Returns:
        scalar Tensor
    """
    s = pred_flat.data.shape[0]
    if s != len(targets):
        raise ValueError("mean_chamfer: batch size mismatch")
    preds = pred_flat.data.reshape(s, -1, 3)
    tgts = [np.asarray(t, dtype=np.float64).reshape(-1, 3) for t in targets]
    # neighbor selection runs in float32 for speed; the loss value and its
    # gradient are computed in float64 from the selected indices
    nns = []
    for i in range(s):
        a32 = preds[i].astype(np.float32)
        b32 = tgts[i].astype(np.float32)
        nns.append((_nearest_rows(a32, b32), _nearest_rows(b32, a32)))
    val = sum(_chamfer_value(preds[i], tgts[i], *nns[i]) for i in range(s)) / s
    out = Tensor(np.array(val), pred_flat.requires_grad, (pred_flat,))

    def backward(g):
        if not pred_flat.requires_grad:
            return
        scale = float(g) / s
        acc = np.zeros_like(preds)
        for i in range(s):
            a, b = preds[i], tgts[i]
            nn_ab, nn_ba = nns[i]
            ga = (2.0 / a.shape[0]) * (a - b[nn_ab])
            np.add.at(ga, nn_ba, (2.0 / b.shape[0]) * (a[nn_ba] - b))
            acc[i] = scale * ga
        pred_flat._accumulate(acc.reshape(pred_flat.data.shape))

    out._backward = backward
    return out


# ============================ attention fusion ============================


@dataclass
class FusionState:
    """Attention weights over the concatenated grid + structure features.

    The point branch encodes the per-point maxima (one value per grid
    point) and the channel branch the per-channel maxima; their outer
    product, squashed by a sigmoid, gates every entry of the
    concatenated feature map.
    """

    point_l1: ad.LinearLayer
    point_l2: ad.LinearLayer
    chan_l1: ad.LinearLayer
    chan_l2: ad.LinearLayer

    @classmethod
    def create(cls, n_points, n_channels, rng, point_hidden=None, chan_hidden=64):
        point_hidden = point_hidden or max(n_points // 4, 1)
        return cls(
            point_l1=ad.linear_layer_init(n_points, point_hidden, rng),
            point_l2=ad.linear_layer_init(point_hidden, n_points, rng),
            chan_l1=ad.linear_layer_init(n_channels, chan_hidden, rng),
            chan_l2=ad.linear_layer_init(chan_hidden, n_channels, rng),
        )

    def params(self):
        out = []
        for layer in (self.point_l1, self.point_l2, self.chan_l1, self.chan_l2):
            out.extend(layer.params())
        return out


def fuse_attention(grid_feats, structure_vec, state):
    """Fuse grid features with a structure vector under learned attention.

    Args:
        grid_feats: (n_points, C2) Tensor or ndarray
        structure_vec: (C1,) Tensor or ndarray
        state: FusionState sized for (n_points, C1 + C2)
    Returns:
        Tensor (n_points, C1 + C2): the gated concatenated features
    """
    fg = ad.as_tensor(grid_feats)
    fs = ad.as_tensor(structure_vec)
    n_points = fg.data.shape[0]
    fc = ad.concat([fg, ad.expand_rows(fs, n_points)], axis=1)
    point_vec = ad.max_over_axis(fc, axis=1)  # (n_points,)
    chan_vec = ad.max_over_axis(fc, axis=0)  # (C1 + C2,)
    p = ad.linear(ad.relu(ad.linear(point_vec, state.point_l1)), state.point_l2)
    c = ad.linear(ad.relu(ad.linear(chan_vec, state.chan_l1)), state.chan_l2)
    att = ad.sigmoid(ad.outer(p, c))
    return ad.mul(fc, att)


# ============================ synthetic corpus ============================


def _sample_ellipsoid(rng, half, n):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * half


def _sample_cuboid(rng, half, n):
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * half[axis]
        pts[m, others[0]] = uv[m, 0] * half[others[0]]
        pts[m, others[1]] = uv[m, 1] * half[others[1]]
    return pts


def make_shape_corpus(count, seed=0, n_complete=1024, drop_range=(0.3, 0.7),
                      half_extent_range=(0.10, 0.42), yaw_range=(-np.pi, np.pi),
                      center_jitter=0.05):
    """Synthetic (partial, complete) surface pairs in a canonical unit box.

    Each shape is a cuboid or ellipsoid shell with per-axis half extents
    drawn from half_extent_range, rotated about the vertical axis by a
    yaw from yaw_range, and offset from the origin by up to center_jitter
    per axis. The partial view removes one contiguous azimuthal sector
    (measured around the shape center) containing a drop_range fraction
    of the points, mimicking self-occlusion. Coordinates are quantized to
    float32 so a corpus round-trips its file format exactly.

    Returns:
        list of (partial (>= n_complete * (1 - drop_hi), 3), complete (n_complete, 3))
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(count):
        half = rng.uniform(*half_extent_range, size=3)
        kind = int(rng.integers(0, 2))
        pts = _sample_cuboid(rng, half, n_complete) if kind == 0 else _sample_ellipsoid(rng, half, n_complete)
        yaw = rng.uniform(*yaw_range)
        c, s = np.cos(yaw), np.sin(yaw)
        pts = pts @ np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
        pts = pts + rng.uniform(-center_jitter, center_jitter, size=3)
        frac = rng.uniform(*drop_range)
        start = int(rng.integers(0, n_complete))
        n_drop = int(round(frac * n_complete))
        centered = pts - pts.mean(axis=0)
        order = np.argsort(np.arctan2(centered[:, 1], centered[:, 0]), kind="stable")
        ring = np.arange(start, start + n_drop) % n_complete
        dropped = np.zeros(n_complete, dtype=bool)
        dropped[order[ring]] = True
        partial = pts[~dropped]
        pairs.append((
            partial.astype(np.float32).astype(np.float64),
            pts.astype(np.float32).astype(np.float64),
        ))
    return pairs


def save_corpus(path, pairs):
    """Persist (partial, complete) pairs as alternating sets in the container format."""
    flat = []
    for partial, complete in pairs:
        flat.append(partial)
        flat.append(complete)
    write_point_sets(path, flat)


def load_corpus(path):
    flat = read_point_sets(path)
    if len(flat) % 2 != 0:
        raise ValueError(f"{path}: odd number of point sets, not a corpus of pairs")
    return [(flat[i], flat[i + 1]) for i in range(0, len(flat), 2)]


# ============================ training ============================


@dataclass
class ShapeTrainConfig:
    """Knobs for the completion training loop.

    The reference recipe is Adam at learning rate 1e-4 decayed by 0.7
    every 50k steps with batches of 32; steps, batch size, and pooling
    resolution stay configurable so a toy run finishes in minutes.
    """

    steps: int = 2000
    learning_rate: float = 1e-4
    decay_factor: float = 0.7
    decay_every: int = 50000
    batch_size: int = 32
    resolution: int = 4
    holdout_fraction: float = 0.25
    seed: int = 0
    box: Box7 = field(default_factory=lambda: CORPUS_BOX)


def _pool_matrices(pairs, cfg):
    grids = [roi_aware_pool(partial, cfg.box, cfg.resolution) for partial, _ in pairs]
    return np.stack([g.matrix for g in grids])


def holdout_chamfer(net, pooled, targets):
    """Mean chamfer of the network's completions over a held-out set."""
    total = 0.0
    for mat, tgt in zip(pooled, targets):
        pred = shape_forward(net, mat, 1).data.reshape(-1, 3)
        nn_ab, nn_ba = _chamfer_parts(pred, tgt)
        total += _chamfer_value(pred, tgt, nn_ab, nn_ba)
    return total / len(targets)


def train_shape_net(pairs, cfg=None, net=None):
    """Train the completion network on (partial, complete) pairs.

    The corpus is split deterministically by the config seed into train
    and holdout shares; every step draws a batch of training pairs, runs
    the segmented batch forward, and applies one Adam update on the mean
    chamfer loss. A non-finite loss aborts immediately.

    Returns:
        (net, dict) where dict has "losses" (per-step floats),
        "holdout_before", "holdout_after", and "holdout_indices"
    """
    cfg = cfg or ShapeTrainConfig()
    rng = np.random.default_rng(cfg.seed)
    if net is None:
        net = ShapePredictor.create(rng)
    n = len(pairs)
    if n < 1:
        raise ValueError("train_shape_net: dataset is empty")
    perm = rng.permutation(n)
    n_hold = max(1, int(round(cfg.holdout_fraction * n))) if cfg.holdout_fraction > 0 else 0
    hold_idx = perm[:n_hold]
    train_idx = perm[n_hold:]
    if train_idx.size == 0:
        raise ValueError("train_shape_net: holdout fraction leaves no training data")

    pooled = _pool_matrices(pairs, cfg)
    targets = [np.asarray(c, dtype=np.float64) for _, c in pairs]
    hold_pool = pooled[hold_idx]
    hold_tgt = [targets[i] for i in hold_idx]

    params = net.params()
    state = ad.AdamState(learning_rate=cfg.learning_rate)
    before = holdout_chamfer(net, hold_pool, hold_tgt) if n_hold else float("nan")

    losses = []
    n_cells = pooled.shape[1]
    # epoch-shuffled minibatch cycling: every pass covers each training
    # pair once before any repeats, which keeps batch composition even
    cycle = rng.permutation(train_idx)
    cursor = 0
    for step in range(cfg.steps):
        if cursor + cfg.batch_size > cycle.size:
            cycle = rng.permutation(train_idx)
            cursor = 0
        sel = cycle[cursor:cursor + cfg.batch_size]
        cursor += cfg.batch_size
        x = pooled[sel].reshape(cfg.batch_size * n_cells, 3)
        out = shape_forward(net, x, cfg.batch_size)
        loss = mean_chamfer(out, [targets[i] for i in sel])
        val = float(loss.data)
        if not np.isfinite(val):
            raise RuntimeError(f"train_shape_net: non-finite loss at step {step}")
        losses.append(val)
        ad.zero_grads(params)
        loss.backward()
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
        state.learning_rate = cfg.learning_rate * cfg.decay_factor ** (step // cfg.decay_every)
        ad.adam_step(params, grads, state)

    after = holdout_chamfer(net, hold_pool, hold_tgt) if n_hold else float("nan")
    return net, {
        "losses": losses,
        "holdout_before": before,
        "holdout_after": after,
        "holdout_indices": hold_idx.tolist(),
    }
