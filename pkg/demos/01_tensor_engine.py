"""A tour of the tensor engine: autodiff, layers, and the optimiser.

Everything in convdial is built on a small reverse-mode autodiff over
numpy arrays.  This script differentiates a few expressions, checks a
convolution gradient against finite differences, and fits a toy function
with Adam.
"""

import numpy as np

from convdial.autodiff import Tensor, no_grad
from convdial.layers import Conv2d, MaskedConv1d
from convdial.optim import Adam

# -- gradients of a simple expression ------------------------------------------

x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
loss = (x * x).sum()
loss.backward()
print("d/dx sum(x^2) at [1,2,3]:", x.grad)          # [2, 4, 6]

# -- convolution vs a finite-difference probe -----------------------------------

conv = Conv2d(1, 1, kernel=3, stride=1, padding=1, dtype=np.float64)
image = Tensor(np.random.default_rng(0).standard_normal((1, 1, 6, 6)),
               requires_grad=True, dtype=np.float64)
out = conv(image)
out.sum().backward()

h = 1e-5
probe = np.zeros_like(image.data)
probe[0, 0, 2, 3] = h
with no_grad():
    up = conv(Tensor(image.data + probe, dtype=np.float64)).data.sum()
    down = conv(Tensor(image.data - probe, dtype=np.float64)).data.sum()
numeric = (up - down) / (2 * h)
print(f"conv gradient at one pixel: analytic {image.grad[0, 0, 2, 3]:+.6f} "
      f"numeric {numeric:+.6f}")

# -- causally masked convolution --------------------------------------------------

masked = MaskedConv1d(2, 2, kernel=3, mask="A", dtype=np.float64)
rows = Tensor(np.random.default_rng(1).standard_normal((1, 2, 8)), requires_grad=True,
              dtype=np.float64)
masked(rows)[:, :, 0].sum().backward()
print("mask A: gradient of output row 0 w.r.t. the whole input:",
      float(np.abs(rows.grad).max()), "(exactly zero)")

# -- Adam on a quadratic bowl ------------------------------------------------------

w = Tensor(np.array([4.0, -3.0]), requires_grad=True, dtype=np.float64)
opt = Adam([w], lr=0.05)
for step in range(300):
    opt.zero_grad()
    ((w - Tensor(np.array([1.0, 2.0]))).pow(2.0)).sum().backward()
    opt.step()
print("Adam minimised |w - (1,2)|^2, w =", np.round(w.data, 4))
