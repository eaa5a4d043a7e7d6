"""Reverse-mode autodiff on numpy: build a graph, backprop, compare with finite differences,
then let Adam walk down a quadratic bowl."""
import numpy as np

from metakd.nn import Adam, Parameter
from metakd.tensor import Tensor, layer_norm, matmul, softmax, tanh

rng = np.random.default_rng(0)

# a small graph: softmax(tanh(x @ w)) weighted by a fixed probe
x = rng.normal(size=(3, 4))
w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
probe = rng.normal(size=(3, 5))
(softmax(tanh(matmul(Tensor(x), w))) * probe).sum().backward()


def f(wv):
    z = np.tanh(x @ wv)
    p = np.exp(z - z.max(1, keepdims=True))
    return float(((p / p.sum(1, keepdims=True)) * probe).sum())


num = np.zeros_like(w.data)
h = 1e-6
for idx in np.ndindex(*w.shape):
    up, down = w.data.copy(), w.data.copy()
    up[idx] += h
    down[idx] -= h
    num[idx] = (f(up) - f(down)) / (2 * h)
print("max |analytic - numeric|:", np.abs(w.grad - num).max())

# layer norm keeps each row at zero mean and unit variance before the affine part
y = layer_norm(Tensor(rng.normal(3.0, 5.0, size=(2, 6))), Tensor(np.ones(6)), Tensor(np.zeros(6)))
print("row means", y.data.mean(1).round(6), "row stds", y.data.std(1).round(4))

# Adam on (p - 3)^2; gradients are zeroed after each step
p = Parameter(np.zeros(3), name="p")
opt = Adam([p], lr=0.1)
for step in range(300):
    ((p - 3.0) * (p - 3.0)).sum().backward()
    opt.step()
print("after 300 Adam steps:", p.data.round(4))
