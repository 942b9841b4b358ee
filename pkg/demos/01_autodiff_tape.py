"""A quick tour of the reverse-mode tape.

Builds a tiny two-layer network by hand, backpropagates a scalar loss, and
then cross-checks every analytic gradient against central finite differences.
"""

import numpy as np

from avmoe import tensor as T
from avmoe.tensor import Tensor

rng = np.random.default_rng(0)

# Parameters are Tensors with requires_grad=True; plain data stays constant.
W1 = Tensor.param(0.3 * rng.normal(size=(4, 8)))
W2 = Tensor.param(0.3 * rng.normal(size=(8, 3)))
X = Tensor(rng.normal(size=(5, 4)))
labels = np.array([0, 2, 1, 2, 0])

hidden = T.gelu(T.matmul(X, W1))
logits = T.matmul(hidden, W2)
loss = T.cross_entropy_rows(logits, labels)
loss.backward()

print(f"loss = {float(loss.data):.6f}")
print(f"dL/dW1 norm = {np.linalg.norm(W1.grad):.6f}")
print(f"dL/dW2 norm = {np.linalg.norm(W2.grad):.6f}")

# grad_check perturbs one parameter and rebuilds the graph per probe.
def through_w1(w):
    return T.cross_entropy_rows(T.matmul(T.gelu(T.matmul(X, w)), W2), labels)

def through_w2(w):
    return T.cross_entropy_rows(T.matmul(T.gelu(T.matmul(X, W1)), w), labels)

for name, p, f in (("W1", W1, through_w1), ("W2", W2, through_w2)):
    err = T.grad_check(f, p)
    print(f"finite-difference check {name}: max relative error {err:.2e}")

# no_grad() suspends taping entirely, e.g. for evaluation passes.
with T.no_grad():
    eval_logits = T.matmul(T.gelu(T.matmul(X, W1)), W2)
print(f"taped under no_grad: {eval_logits.requires_grad}")
