"""
Reverse-mode gradients on a tiny graph
======================================

Build a small expression, differentiate it once, and compare against
central finite differences.
"""
import numpy as np

from courtnet import tensor as T
from courtnet.gradcheck import grad_check, run_suite
from courtnet.tensor import Tensor

rng = np.random.default_rng(0)
x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = Tensor(rng.standard_normal((4, 5)), requires_grad=True)

# a linear layer, a nonlinearity and a scalar reduction
y = T.gelu(T.linear(x, w)).sum()
y.backward()
print("loss", y.item())
print("d loss / d x\n", np.round(x.grad, 4))

# the same derivative from finite differences
err = grad_check(lambda a, b: T.gelu(T.linear(a, b)), [Tensor(x.data), Tensor(w.data)])
print(f"relative error vs finite differences: {err:.2e}")

# a graph can only be walked once
try:
    y.backward()
except T.TapeError as exc:
    print("second backward refused:", exc)

# the full operator suite, one seed
worst = max(run_suite((0,)), key=lambda r: r[2] / r[3])
print("worst case in the suite:", worst)
