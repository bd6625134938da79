"""Reverse-mode automatic differentiation on a flat tape.

Every op records its inputs and a backward rule; calling backward() on a
scalar walks the tape once in reverse. The finite-difference checker
compares analytic gradients against central differences, and a small
Adam loop fits a two-layer network to a toy regression target.
"""

import numpy as np

from lidardet import autodiff as ad

rng = np.random.default_rng(0)

# --- 1. gradients of a small expression ------------------------------------
x = ad.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]))
y = ad.parameter(np.array([[0.5, -1.0], [2.0, 0.25]]))
loss = ad.tsum(ad.mul(ad.tsin(x), ad.sigmoid(y)))
loss.backward()
print("d/dx sum(sin(x) * sigmoid(y)) =")
print(np.round(x.grad, 6))
print("analytic cos(x) * sigmoid(y) =")
print(np.round(np.cos(x.data) / (1.0 + np.exp(-y.data)), 6))

# --- 2. the finite-difference check used throughout the test suite ---------
a = ad.parameter(rng.normal(size=(3, 4)))
b = ad.parameter(rng.normal(size=(4, 2)))
err = ad.grad_check(lambda: ad.tsum(ad.relu(ad.matmul(a, b))), [a, b], h=1e-6)
print(f"\nrelu(matmul) FD relative error: {err:.2e}")

# --- 3. max-pooling over rows routes gradient to the winners ---------------
m = ad.parameter(np.array([[1.0, 5.0], [3.0, 2.0], [4.0, 0.0]]))
pooled = ad.set_max_pool(m)
out = ad.tsum(pooled)
out.backward()
print("\nset_max_pool input:\n", m.data)
print("gradient lands on per-column maxima:\n", m.grad)

# --- 4. fit y = sin(2x) with a tiny MLP and Adam ----------------------------
xs = np.linspace(-2.0, 2.0, 64).reshape(-1, 1)
ys = np.sin(2.0 * xs)
l1 = ad.linear_layer_init(1, 16, rng)
l2 = ad.linear_layer_init(16, 1, rng)
params = l1.params() + l2.params()
state = ad.AdamState(learning_rate=3e-3)


def forward():
    h = ad.relu(ad.linear(ad.as_tensor(xs), l1))
    pred = ad.linear(h, l2)
    return ad.tmean(ad.power(ad.sub(pred, ad.as_tensor(ys)), 2.0))


first = None
for step in range(400):
    ad.zero_grads(params)
    mse = forward()
    mse.backward()
    ad.adam_step(params, [p.grad for p in params], state)
    if first is None:
        first = float(mse.data)
    if step % 100 == 99:
        print(f"step {step + 1:3d}: mse {float(mse.data):.5f}")
print(f"mse reduced {first:.4f} -> {float(forward().data):.4f}")
