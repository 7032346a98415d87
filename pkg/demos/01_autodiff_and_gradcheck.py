"""
Reverse-mode gradients and finite-difference checks
====================================================

A small tour of the autodiff engine: build a graph from convolution,
batch norm and relu, backpropagate a scalar, and compare the result with
central differences.
"""

# %%
import numpy as np

from dfdnet.autodiff import (Tensor, batch_norm, conv2d, default_dtype, grad_check, reduce, relu,
                             tie_free_point)

rng = np.random.default_rng(0)

# Tensors cast to 32-bit by default; requires_grad marks leaves we want gradients for
x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True)
k = Tensor(rng.standard_normal((4, 3, 3, 3)) * 0.2, requires_grad=True)
print("input", x.shape, x.dtype)

# %%
# A forward pass records a graph; backward() walks it once in reverse
y = conv2d(x, k, padding="same", pad_mode="reflect")
y = batch_norm(y, Tensor(np.ones(4)), Tensor(np.zeros(4)), np.zeros(4), np.ones(4), training=True)
loss = reduce(relu(y), "mean_sq")
loss.backward()
print("loss", float(loss.data), "| d loss / d kernel norm", np.linalg.norm(k.grad))

# %%
# Gradient checks run in 64-bit. Points near relu kinks or median ties
# would be reported as unverifiable rather than compared.
def block(xt, kt):
    return relu(conv2d(xt, kt, padding="same"))

point = tie_free_point((1, 2, 5, 5), rng)
report = grad_check(block, [point, rng.standard_normal((3, 2, 3, 3))])
print(f"checked {report.checked} coordinates, max relative error {report.max_rel_error:.2e}, "
      f"unverifiable {len(report.unverifiable)}")

# %%
# default_dtype switches the whole graph, parameters included
with default_dtype(np.float64):
    print("inside the context:", Tensor([1.0]).dtype)
print("outside:", Tensor([1.0]).dtype)
