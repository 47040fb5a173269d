"""
Gradients by hand, checked by finite differences
================================================

The package carries its own small reverse-mode engine over float64 arrays.
Here we build an objective, take its gradient, and compare against central
differences.
"""

import numpy as np

from uniprompt import diffcore as dc

rng = np.random.default_rng(0)

# two leaf tensors we want gradients for
W = dc.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
b = dc.Tensor(rng.normal(size=3), requires_grad=True)
x = dc.constant(rng.normal(size=(4, 5)))


def objective():
    # unit-normalised rows, then a logsumexp over each column
    h = dc.l2_normalize(dc.relu(x @ W + b))
    return dc.sum(dc.logsumexp(h / 0.07, axis=0))


loss = objective()
grads = dc.backward(loss)
print("loss", loss.item())

# central differences perturb every coordinate in place and restore it
fd = dc.finite_diff(objective, [W, b], eps=1e-5)
for name, t in (("W", W), ("b", b)):
    print(name, "max relative error", dc.max_rel_error(grads[t], fd[t]))

# stop-gradient: the detached copy contributes a value but no gradient
y = dc.Tensor([1.0, 2.0], requires_grad=True)
g = dc.backward(dc.sum(dc.mul(dc.detach(y), y)))
print("d/dy sum(stop(y) * y) =", g[y])
