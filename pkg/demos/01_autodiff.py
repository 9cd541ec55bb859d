"""Tour of the autodiff core: tensors, the tape, and gradient checking.

Fits a two-layer net to a toy curve with nothing but the op set the
segmentation model itself uses, then verifies one op's gradients with
central differences. Run it; total time is a second or two.
"""

import numpy as np

from dualseg import GradTape, Tensor, gradcheck
from dualseg import autodiff as ad

rng = np.random.default_rng(0)

# toy regression: y = sin(3x) sampled on [-1, 1]
xs = np.linspace(-1.0, 1.0, 64).reshape(-1, 1)
ys = np.sin(3.0 * xs)

# ops add/sub require matching shapes (no silent broadcasting), so the
# toy net carries the bias as an extra constant input column instead
w1 = Tensor(rng.normal(0, 0.5, (2, 24)), requires_grad=True)
w2 = Tensor(rng.normal(0, 0.5, (24, 1)), requires_grad=True)
params = [w1, w2]

x = Tensor(np.hstack([xs, np.ones_like(xs)]))
y = Tensor(ys)

for step in range(400):
    for p in params:
        p.grad = None
    with GradTape() as tape:
        hidden = ad.relu(ad.matmul(x, w1))
        pred = ad.matmul(hidden, w2)
        err = ad.sub(pred, y)
        loss = ad.mean_all(ad.mul(err, err))
    tape.backward(loss)
    for p in params:
        p.data -= 0.5 * p.grad
    if step % 100 == 0 or step == 399:
        print(f"step {step:3d}  mse {float(loss.data):.5f}")

print()
print("every forward op records onto the active tape; backward walks it once.")
print("gradcheck contracts the output with fixed random weights and compares")
print("analytic gradients against central differences:")
for name, fn, args in [
    ("softmax_rows", lambda t: ad.softmax_rows(t), (rng.normal(size=(3, 4)),)),
    ("conv2d pad=1", lambda t, k: ad.conv2d(t, k, padding=1),
     (rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3)))),
    ("bilinear_resize", lambda t: ad.bilinear_resize(t, 7, 3),
     (rng.normal(size=(2, 4, 6)),)),
]:
    err = gradcheck(fn, args, epsilon=1e-5)
    print(f"  {name:16s} max rel err {err:.2e}")
