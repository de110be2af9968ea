"""
Reverse-mode autodiff on numpy arrays
=====================================

Build a tiny expression, run backward, and compare against a
central difference.
"""
import numpy as np

from eegmtl import Tensor, backward
from eegmtl.nn import functional as F
from eegmtl.tensor import tsum

x = Tensor(np.array([[0.5, -1.0, 2.0]]), requires_grad=True)
w = Tensor(np.array([[1.0], [2.0], [-0.5]]), requires_grad=True)

# y = sum(gelu(x @ w)^2)
y = tsum(F.gelu(x @ w) * F.gelu(x @ w))
backward(y)
print("y =", y.item())
print("dy/dw =", w.grad.ravel())

# same thing by finite differences
eps = 1e-6
num = []
for i in range(3):
    w.data[i, 0] += eps
    up = tsum(F.gelu(x @ w) * F.gelu(x @ w)).item()
    w.data[i, 0] -= 2 * eps
    down = tsum(F.gelu(x @ w) * F.gelu(x @ w)).item()
    w.data[i, 0] += eps
    num.append((up - down) / (2 * eps))
print("numeric  =", np.array(num))

# gradients accumulate until zeroed
backward(y)
print("after a second backward:", w.grad.ravel())
