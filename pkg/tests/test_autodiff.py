import math
import os

import numpy as np
import pytest

import lidardet.autodiff as ad
from lidardet.autodiff import Tensor


def rand_param(rng, shape, scale=1.0):
    return ad.parameter(rng.uniform(-scale, scale, size=shape))


def test_linear_identity():
    layer = ad.LinearLayer(ad.parameter(np.eye(2)), ad.parameter(np.zeros(2)))
    out = ad.linear(Tensor(np.array([1.0, 0.0])), layer)
    assert out.data.tolist() == [1.0, 0.0]


def test_linear_hand_value():
    layer = ad.LinearLayer(
        ad.parameter(np.array([[1.0, 1.0], [0.0, 1.0]])),
        ad.parameter(np.array([0.5, 0.0])),
    )
    out = ad.linear(Tensor(np.array([2.0, 3.0])), layer)
    assert out.data.tolist() == [5.5, 3.0]


def test_linear_shape_error():
    layer = ad.linear_layer_init(3, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        ad.linear(Tensor(np.zeros((4, 5))), layer)


def test_linear_is_linear():
    rng = np.random.default_rng(0)
    w = ad.parameter(rng.normal(size=(3, 4)))
    layer = ad.LinearLayer(w, ad.parameter(np.zeros(3)))
    x = rng.normal(size=(5, 4))
    y = rng.normal(size=(5, 4))
    a, b = 1.7, -0.3
    lhs = ad.linear(Tensor(a * x + b * y), layer).data
    rhs = a * ad.linear(Tensor(x), layer).data + b * ad.linear(Tensor(y), layer).data
    assert np.abs(lhs - rhs).max() < 1e-12


def test_relu_sigmoid_values():
    assert ad.relu(Tensor(np.array([-1.0, 2.0]))).data.tolist() == [0.0, 2.0]
    assert float(ad.sigmoid(Tensor(np.array(0.0))).data) == 0.5
    assert abs(float(ad.sigmoid(Tensor(np.array(2.0))).data) - 1.0 / (1.0 + math.exp(-2.0))) < 1e-15
    # large magnitudes stay finite
    big = ad.sigmoid(Tensor(np.array([800.0, -800.0]))).data
    assert big[0] == 1.0 and big[1] == 0.0


def test_set_max_pool_values_and_ties():
    out = ad.set_max_pool(Tensor(np.array([[1.0, 5.0], [3.0, 2.0]])))
    assert out.data.tolist() == [3.0, 5.0]
    single = ad.set_max_pool(Tensor(np.array([[7.0, -2.0]])))
    assert single.data.tolist() == [7.0, -2.0]
    # ties route the gradient to the lowest row index
    x = ad.parameter(np.array([[1.0, 0.0], [1.0, 0.0]]))
    ad.tsum(ad.set_max_pool(x)).backward()
    assert x.grad[0, 0] == 1.0 and x.grad[1, 0] == 0.0


def test_set_max_pool_empty_error():
    with pytest.raises(ValueError):
        ad.set_max_pool(Tensor(np.zeros((0, 3))))


def test_set_max_pool_permutation_invariant():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(17, 5))
    base = ad.set_max_pool(Tensor(x)).data
    for _ in range(5):
        perm = rng.permutation(17)
        assert np.array_equal(ad.set_max_pool(Tensor(x[perm])).data, base)


def test_expand_rows_and_concat():
    out = ad.expand_rows(Tensor(np.array([1.0, 2.0])), 3)
    assert out.data.tolist() == [[1.0, 2.0]] * 3
    a = Tensor(np.zeros((4, 2)))
    b = Tensor(np.ones((4, 3)))
    assert ad.concat([a, b], axis=1).data.shape == (4, 5)
    with pytest.raises(ValueError):
        ad.concat([a, Tensor(np.zeros((5, 3)))], axis=1)


def test_backward_requires_scalar():
    x = ad.parameter(np.ones(3))
    with pytest.raises(ValueError):
        ad.scale(x, 2.0).backward()


def test_grad_check_analytic_square():
    # f = sum(x^2) at x=[1,2]: analytic [2,4]
    x = ad.parameter(np.array([1.0, 2.0]))
    err = ad.grad_check(lambda: ad.tsum(ad.mul(x, x)), [x])
    assert err < 1e-8
    ad.zero_grads([x])
    ad.tsum(ad.mul(x, x)).backward()
    assert np.abs(x.grad - np.array([2.0, 4.0])).max() < 1e-12


def test_grad_check_constant():
    x = ad.parameter(np.array([1.0, 2.0]))
    c = Tensor(np.array(5.0))
    err = ad.grad_check(lambda: ad.add(ad.scale(ad.tsum(x), 0.0), c), [x])
    assert err == 0.0


def unary_cases(rng):
    x = rand_param(rng, (4, 3))
    xp = ad.parameter(rng.uniform(0.1, 2.0, size=(4, 3)))  # positive for log/power
    return [
        ("neg", lambda: ad.tsum(ad.neg(x)), [x]),
        ("scale", lambda: ad.tmean(ad.scale(x, -1.7)), [x]),
        ("add_const", lambda: ad.tsum(ad.add_const(x, 2.5)), [x]),
        ("power", lambda: ad.tsum(ad.power(xp, 1.7)), [xp]),
        ("log", lambda: ad.tsum(ad.log(xp)), [xp]),
        ("clamp_min", lambda: ad.tsum(ad.clamp_min(x, 0.25)), [x]),
        ("tsin", lambda: ad.tsum(ad.tsin(x)), [x]),
        ("relu", lambda: ad.tsum(ad.relu(x)), [x]),
        ("sigmoid", lambda: ad.tsum(ad.sigmoid(x)), [x]),
        ("smooth_l1", lambda: ad.tsum(ad.smooth_l1(x)), [x]),
        ("reshape", lambda: ad.tsum(ad.reshape(x, (12,))), [x]),
        ("tmean", lambda: ad.tmean(x), [x]),
        ("max_rows", lambda: ad.tsum(ad.max_over_axis(x, axis=1)), [x]),
        ("max_cols", lambda: ad.tsum(ad.max_over_axis(x, axis=0)), [x]),
        ("set_max_pool", lambda: ad.tsum(ad.set_max_pool(x)), [x]),
        ("expand_rows_sq", lambda: ad.tsum(ad.mul(ad.expand_rows(ad.max_over_axis(x, 0), 5),
                                                  ad.expand_rows(ad.max_over_axis(x, 0), 5))), [x]),
    ]


def binary_cases(rng):
    a = rand_param(rng, (4, 3))
    b = rand_param(rng, (4, 3))
    m = rand_param(rng, (4, 5))
    n = rand_param(rng, (5, 3))
    v = rand_param(rng, (4,))
    u = rand_param(rng, (3,))
    layer = ad.linear_layer_init(3, 6, rng)
    idx = rng.integers(0, 4, size=7)
    seg = rand_param(rng, (6, 3))
    return [
        ("add", lambda: ad.tsum(ad.add(a, b)), [a, b]),
        ("sub", lambda: ad.tsum(ad.sub(a, b)), [a, b]),
        ("mul", lambda: ad.tmean(ad.mul(a, b)), [a, b]),
        ("matmul", lambda: ad.tsum(ad.matmul(m, n)), [m, n]),
        ("linear", lambda: ad.tsum(ad.linear(a, layer)), [a, layer.weight, layer.bias]),
        ("concat", lambda: ad.tsum(ad.mul(ad.concat([a, b], axis=1), ad.concat([b, a], axis=1))), [a, b]),
        ("take_rows", lambda: ad.tsum(ad.mul(ad.take_rows(a, idx), ad.take_rows(a, idx))), [a]),
        ("outer", lambda: ad.tsum(ad.outer(v, u)), [v, u]),
        ("segment_max_pool", lambda: ad.tsum(ad.segment_max_pool(seg, 2)), [seg]),
        ("expand_segments", lambda: ad.tsum(ad.mul(ad.expand_segments(ad.segment_max_pool(seg, 2), 3), seg)), [seg]),
    ]


def test_every_op_matches_finite_differences():
    for seed in range(8):
        rng = np.random.default_rng(seed)
        for name, f, params in unary_cases(rng) + binary_cases(rng):
            err = ad.grad_check(f, params, rng=np.random.default_rng(seed + 100))
            assert err < 1e-4, f"{name} failed grad check at seed {seed}: {err}"


def test_adam_first_step_delta():
    # bias-corrected first step with grad 1 moves by about -lr
    p = ad.parameter(np.array([1.0]))
    state = ad.AdamState(learning_rate=1e-3)
    ad.adam_step([p], [np.array([1.0])], state)
    delta = p.data[0] - 1.0
    assert abs(delta - (-9.99999e-4)) < 1e-9
    assert state.step_count == 1


def test_adam_zero_grad_and_zero_lr():
    rng = np.random.default_rng(1)
    p = rand_param(rng, (3, 2))
    before = p.data.copy()
    ad.adam_step([p], [np.zeros((3, 2))], ad.AdamState(learning_rate=1e-3))
    assert np.array_equal(p.data, before)
    ad.adam_step([p], [rng.normal(size=(3, 2))], ad.AdamState(learning_rate=0.0))
    assert np.array_equal(p.data, before)


def scalar_adam_reference(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook scalar Adam, one parameter starting at 0."""
    p, m, v = 0.0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(p)
    return out


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(5)
    grads = rng.normal(size=20)
    p = ad.parameter(np.array([0.0]))
    state = ad.AdamState(learning_rate=1e-3)
    mine = []
    for g in grads:
        ad.adam_step([p], [np.array([g])], state)
        mine.append(p.data[0])
    ref = scalar_adam_reference(grads)
    assert np.abs(np.array(mine) - np.array(ref)).max() < 1e-12


def test_gradient_accumulates_once_per_ancestor():
    # diamond graph: x feeds two paths that rejoin
    x = ad.parameter(np.array([2.0]))
    y = ad.add(ad.mul(x, x), ad.scale(x, 3.0))  # x^2 + 3x
    ad.tsum(y).backward()
    assert abs(x.grad[0] - (2 * 2.0 + 3.0)) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    arrays = {
        "enc.w": rng.normal(size=(4, 3)),
        "enc.b": rng.normal(size=(4,)),
        "scalar": np.array(2.5),
    }
    path = os.path.join(tmp_path, "net.ckpt")
    ad.save_checkpoint(path, arrays)
    back = ad.load_checkpoint(path)
    assert sorted(back) == sorted(arrays)
    for k in arrays:
        assert np.array_equal(back[k], np.asarray(arrays[k], dtype=np.float64))
    # and the header carries the magic string
    with open(path, "rb") as fh:
        assert fh.read(8) == b"LDRCKPT1"


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = os.path.join(tmp_path, "bad.ckpt")
    with open(path, "wb") as fh:
        fh.write(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError):
        ad.load_checkpoint(path)
