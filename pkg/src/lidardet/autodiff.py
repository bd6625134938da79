"""Minimal reverse-mode automatic differentiation on numpy arrays.

Everything runs in float64 on a fixed set of hand-written ops: each op
records its parents and a closure that pushes the output gradient back
to them.  There is no graph compiler, no broadcasting zoo, no dtype
politics; shapes are whatever the op contract below says they are.
Forward passes are pure, so a fresh tape is built every call and a
parameter update between calls is all an optimizer needs.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_const",
    "power",
    "log",
    "clamp_min",
    "tsin",
    "relu",
    "sigmoid",
    "matmul",
    "linear",
    "tsum",
    "tmean",
    "concat",
    "take_rows",
    "reshape",
    "max_over_axis",
    "set_max_pool",
    "segment_max_pool",
    "expand_rows",
    "expand_segments",
    "outer",
    "smooth_l1",
    "LinearLayer",
    "linear_layer_init",
    "AdamState",
    "adam_step",
    "zero_grads",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]


class Tensor:
    """A float64 array plus the bookkeeping needed for one backward pass.

    data is always C-contiguous float64.  grad stays None until some
    backward pass deposits into it.  Tensors produced by ops are treated
    as immutable values; only optimizer code rewrites leaf .data buffers
    between tapes.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            # ascontiguousarray would also promote 0-d scalars to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; the real work lives in the module-level ops
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __radd__(self, other):
        return add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -other)

    def __rsub__(self, other):
        return add_const(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __neg__(self):
        return neg(self)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        if self.grad is None:
            # copy: g may be shared with a sibling's accumulation
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the recorded tape.

        Visits each node exactly once in reverse topological order, so
        every requires_grad ancestor ends up with a fully accumulated
        gradient after the single pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() is only defined for scalar outputs")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x, requires_grad=False):
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def parameter(data):
    return Tensor(data, requires_grad=True)


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


# ============================ elementwise ops ============================


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data + b.data, _needs_grad(a, b), (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    out._backward = backward
    return out


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"sub: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data - b.data, _needs_grad(a, b), (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    out._backward = backward
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = Tensor(a.data * b.data, _needs_grad(a, b), (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out._backward = backward
    return out


def neg(a):
    out = Tensor(-a.data, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(-g) if a.requires_grad else None
    return out


def scale(a, c):
    c = float(c)
    out = Tensor(a.data * c, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * c) if a.requires_grad else None
    return out


def add_const(a, c):
    out = Tensor(a.data + float(c), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g) if a.requires_grad else None
    return out


def power(a, p):
    """Elementwise a**p for a real exponent; caller guarantees a > 0 when p is non-integral."""
    p = float(p)
    out = Tensor(np.power(a.data, p), a.requires_grad, (a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * np.power(a.data, p - 1.0))

    out._backward = backward
    return out


def log(a):
    out = Tensor(np.log(a.data), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g / a.data) if a.requires_grad else None
    return out


def clamp_min(a, floor):
    """max(a, floor) elementwise; gradient passes only where a > floor."""
    floor = float(floor)
    mask = a.data > floor
    out = Tensor(np.maximum(a.data, floor), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * mask) if a.requires_grad else None
    return out


def tsin(a):
    out = Tensor(np.sin(a.data), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * np.cos(a.data)) if a.requires_grad else None
    return out


def relu(a):
    mask = a.data > 0.0
    out = Tensor(np.where(mask, a.data, 0.0), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * mask) if a.requires_grad else None
    return out


def sigmoid(a):
    # split by sign to stay finite for large |x|
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = Tensor(s, a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g * s * (1.0 - s)) if a.requires_grad else None
    return out


def smooth_l1(a, beta=1.0):
    """Huber-style elementwise penalty: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    beta = float(beta)
    x = a.data
    inside = np.abs(x) < beta
    val = np.where(inside, 0.5 * x * x / beta, np.abs(x) - 0.5 * beta)
    out = Tensor(val, a.requires_grad, (a,))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * np.where(inside, x / beta, np.sign(x)))

    out._backward = backward
    return out


# ============================ structural ops ============================


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data, _needs_grad(a, b), (a, b))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def linear(x, layer):
    """Affine map y = x @ W^T + b.

    Args:
        x: Tensor of shape (in,) or (n, in)
        layer: LinearLayer with weight (out, in) and bias (out,)
    Returns:
        Tensor of shape (out,) or (n, out)
    """
    x = as_tensor(x)
    w, b = layer.weight, layer.bias
    single = x.data.ndim == 1
    xd = x.data[None, :] if single else x.data
    if xd.shape[1] != w.data.shape[1]:
        raise ValueError(f"linear: input width {xd.shape[1]} != layer fan-in {w.data.shape[1]}")
    y = xd @ w.data.T + b.data
    out = Tensor(y[0] if single else y, _needs_grad(x, w, b), (x, w, b))

    def backward(g):
        gd = g[None, :] if single else g
        if x.requires_grad:
            gx = gd @ w.data
            x._accumulate(gx[0] if single else gx)
        if w.requires_grad:
            w._accumulate(gd.T @ xd)
        if b.requires_grad:
            b._accumulate(gd.sum(axis=0))

    out._backward = backward
    return out


def tsum(a):
    out = Tensor(np.array(a.data.sum()), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(np.full_like(a.data, float(g))) if a.requires_grad else None
    return out


def tmean(a):
    n = a.data.size
    out = Tensor(np.array(a.data.mean()), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(np.full_like(a.data, float(g) / n)) if a.requires_grad else None
    return out


def concat(parts, axis=0):
    parts = [as_tensor(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis), _needs_grad(*parts), tuple(parts))
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                p._accumulate(g[tuple(sl)])

    out._backward = backward
    return out


def take_rows(a, indices):
    """Select rows by index; backward scatter-adds into the source rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx], a.requires_grad, (a,))

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            np.add.at(acc, idx, g)
            a._accumulate(acc)

    out._backward = backward
    return out


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,))
    out._backward = lambda g: a._accumulate(g.reshape(a.data.shape)) if a.requires_grad else None
    return out


def max_over_axis(a, axis):
    """Max-reduce a 2-D tensor along one axis; ties route gradient to the lowest index."""
    if a.data.ndim != 2:
        raise ValueError("max_over_axis expects a 2-D tensor")
    arg = np.argmax(a.data, axis=axis)  # first occurrence wins ties
    out = Tensor(np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis),
                 a.requires_grad, (a,))

    def backward(g):
        if a.requires_grad:
            acc = np.zeros_like(a.data)
            if axis == 0:
                acc[arg, np.arange(a.data.shape[1])] = g
            else:
                acc[np.arange(a.data.shape[0]), arg] = g
            a._accumulate(acc)

    out._backward = backward
    return out


def set_max_pool(a):
    """Column-wise max over a point set: (n, C) -> (C,). Permutation invariant."""
    return max_over_axis(a, axis=0)


def segment_max_pool(a, n_segments):
    """Max pool over equal-length contiguous row segments: (S*n, C) -> (S, C)."""
    rows, cols = a.data.shape
    if rows % n_segments != 0:
        raise ValueError("segment_max_pool: rows not divisible by n_segments")
    n = rows // n_segments
    view = a.data.reshape(n_segments, n, cols)
    arg = np.argmax(view, axis=1)
    out = Tensor(np.take_along_axis(view, arg[:, None, :], axis=1)[:, 0, :], a.requires_grad, (a,))

    def backward(g):
        if a.requires_grad:
            acc = np.zeros((n_segments, n, cols))
            s = np.arange(n_segments)[:, None]
            c = np.arange(cols)[None, :]
            acc[s, arg, c] = g
            a._accumulate(acc.reshape(rows, cols))

    out._backward = backward
    return out


def expand_rows(v, n):
    """Tile a vector (C,) into a matrix (n, C); backward sums over the rows."""
    if v.data.ndim != 1:
        raise ValueError("expand_rows expects a 1-D tensor")
    out = Tensor(np.broadcast_to(v.data, (n, v.data.shape[0])).copy(), v.requires_grad, (v,))
    out._backward = lambda g: v._accumulate(g.sum(axis=0)) if v.requires_grad else None
    return out


def expand_segments(m, reps):
    """Repeat each row of (S, C) reps times -> (S*reps, C); backward sums per segment."""
    s, c = m.data.shape
    out = Tensor(np.repeat(m.data, reps, axis=0), m.requires_grad, (m,))
    out._backward = lambda g: m._accumulate(g.reshape(s, reps, c).sum(axis=1)) if m.requires_grad else None
    return out


def outer(u, v):
    """Outer product (n,) x (m,) -> (n, m)."""
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise ValueError("outer expects 1-D tensors")
    out = Tensor(np.outer(u.data, v.data), _needs_grad(u, v), (u, v))

    def backward(g):
        if u.requires_grad:
            u._accumulate(g @ v.data)
        if v.requires_grad:
            v._accumulate(g.T @ u.data)

    out._backward = backward
    return out


# ============================ layers & optimizer ============================


@dataclass
class LinearLayer:
    """Weight (out, in) and bias (out,), both trainable Tensors."""

    weight: Tensor
    bias: Tensor

    @property
    def fan_in(self):
        return self.weight.data.shape[1]

    @property
    def fan_out(self):
        return self.weight.data.shape[0]

    def params(self):
        return [self.weight, self.bias]


def linear_layer_init(fan_in, fan_out, rng, weight_scale=None):
    """Uniform init in +-1/sqrt(fan_in); weight_scale shrinks both ranges if given."""
    bound = 1.0 / np.sqrt(fan_in)
    if weight_scale is not None:
        bound *= float(weight_scale)
    w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return LinearLayer(parameter(w), parameter(b))


@dataclass
class AdamState:
    """Adam moment buffers plus hyperparameters; one entry per parameter tensor."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    _scratch: list = field(default_factory=list, repr=False)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to params.

    Per parameter x with gradient g:
        m <- b1 m + (1 - b1) g        m_hat = m / (1 - b1^t)
        v <- b2 v + (1 - b2) g^2      v_hat = v / (1 - b2^t)
        x <- x - lr * m_hat / (sqrt(v_hat) + eps)

    Args:
        params: list of parameter Tensors
        grads: list of ndarrays aligned with params (zeros stand in for None)
        state: AdamState; moment buffers are created lazily on first use
    Returns:
        (params, state) after the update
    """
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
        state._scratch = [np.empty_like(p.data) for p in params]
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("adam_step: params, grads, and state buffers disagree in length")
    if not state._scratch:
        state._scratch = [np.empty_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v, s in zip(params, grads, state.first_moment, state.second_moment, state._scratch):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        np.multiply(g, 1.0 - b1, out=s)
        m += s
        v *= b2
        np.multiply(g, g, out=s)
        s *= 1.0 - b2
        v += s
        np.divide(v, c2, out=s)
        np.sqrt(s, out=s)
        s += state.epsilon
        np.divide(m, s, out=s)
        s *= state.learning_rate / c1
        p.data -= s
    return params, state


def zero_grads(params):
    for p in params:
        p.grad = None


# ============================ gradient checking ============================


def grad_check(f, tensors, h=1e-4, max_coords_per_tensor=None, rng=None):
    """Compare analytic gradients of a scalar-valued f against central differences.

    f is a zero-argument closure over `tensors` that rebuilds its tape from
    the tensors' current data each call.  For each checked coordinate x the
    numeric estimate is (f(x+h) - f(x-h)) / 2h, and the reported error is

        |analytic - numeric| / max(1, |analytic|, |numeric|)

    maximized over all checked coordinates.  Large tensors can be spot
    checked by capping coordinates per tensor; the subset is drawn from
    `rng` (all coordinates when the cap is None).

    Returns:
        the maximum relative error as a float
    """
    for t in tensors:
        if not t.requires_grad:
            raise ValueError("grad_check: every checked tensor must require grad")
    zero_grads(tensors)
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check: f must produce a scalar")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    zero_grads(tensors)

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ga_flat = ga.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            if rng is None:
                rng = np.random.default_rng(0)
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        for i in coords:
            keep = flat[i]
            flat[i] = keep + h
            f_plus = float(f().data)
            flat[i] = keep - h
            f_minus = float(f().data)
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(ga_flat[i])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst


# ============================ checkpoint format ============================

_CKPT_MAGIC = b"LDRCKPT1"


def save_checkpoint(path, named_params):
    """Write named parameter arrays to a binary checkpoint.

    Layout, all integers little-endian uint32, floats little-endian float64:
        magic "LDRCKPT1" | count | repeat: name_len, name utf-8, rank, dims..., values
    Entries are written in sorted name order so equal parameter sets always
    produce identical bytes.
    """
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        names = sorted(named_params)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            arr = named_params[name]
            data = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
            if not data.flags["C_CONTIGUOUS"]:
                data = np.ascontiguousarray(data)  # keeps 0-d arrays 0-d
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; returns {name: float64 ndarray}."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
    off = len(_CKPT_MAGIC)

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<I")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = arr.astype(np.float64).reshape(dims)
    if off != len(blob):
        warnings.warn(f"{path}: {len(blob) - off} trailing bytes ignored")
    return out
