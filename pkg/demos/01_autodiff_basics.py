"""
A tour of the float64 autodiff core
===================================

Every trainable piece of the package sits on one small reverse-mode
engine: Tensors wrap numpy arrays, operations record closures, and
backward() walks the tape. This script builds a few graphs by hand and
checks the machine gradients against finite differences.
"""

import numpy as np

from histodistill import autodiff as ad
from histodistill.autodiff import backward, tensor

rng = np.random.default_rng(7)

# ---------------------------------------------------------------------------
# a scalar chain: y = tanh(w * x + b)
# ---------------------------------------------------------------------------

x = tensor(np.array([0.5]))
w = tensor(np.array([1.2]), requires_grad=True)
b = tensor(np.array([-0.3]), requires_grad=True)

y = ad.tanh(ad.add(ad.mul(w, x), b))
print("forward value:", y.values)

grads = backward(y)
print("dy/dw:", grads[w], " analytic:", (1 - np.tanh(1.2 * 0.5 - 0.3) ** 2) * 0.5)
print("dy/db:", grads[b], " analytic:", (1 - np.tanh(1.2 * 0.5 - 0.3) ** 2))

# ---------------------------------------------------------------------------
# gradients accumulate
# ---------------------------------------------------------------------------

# backward() adds into each leaf's .grad rather than overwriting it, which
# is what lets the trainer sum gradients over an accumulation group before
# one optimizer step. Calling it twice therefore doubles the stored grad:

backward(ad.tanh(ad.add(ad.mul(w, x), b)))
print("after a second backward, w.grad =", w.grad, "(twice dy/dw)")

# start a fresh measurement by zeroing explicitly
ad.zero_grads([w, b])
print("after zero_grads, w.grad =", w.grad)

# ---------------------------------------------------------------------------
# a matrix graph with softmax and a reduction
# ---------------------------------------------------------------------------

A = tensor(rng.normal(size=(3, 4)), requires_grad=True)
v = tensor(rng.normal(size=(4, 2)), requires_grad=True)

scores = ad.matmul(A, v)             # (3, 2)
probs = ad.softmax(scores, axis=1)   # rows sum to one
loss = ad.mean(ad.mul(probs, probs))

print("\nloss:", loss.values)
grads = backward(loss)
print("grad shapes:", grads[A].shape, grads[v].shape)

# ---------------------------------------------------------------------------
# finite-difference cross-check
# ---------------------------------------------------------------------------

# grad_check perturbs every entry of every parameter by +-eps and compares
# the centered difference to the recorded gradient, reporting the worst
# relative error. The same routine backs the package-wide `grad-check`
# CLI command.


def rebuild(params):
    scores = ad.matmul(params["A"], params["v"])
    probs = ad.softmax(scores, axis=1)
    return ad.mean(ad.mul(probs, probs))


worst = ad.grad_check(rebuild, {"A": A, "v": v})
print("worst relative error across A and v:", worst)
assert worst < 1e-6

# ---------------------------------------------------------------------------
# stop_gradient
# ---------------------------------------------------------------------------

# stop_gradient passes values through untouched but cuts the tape. The
# survival branch uses the same trick for its top-k attention mask.

ad.zero_grads([A, v])
frozen = ad.stop_gradient(ad.matmul(A, v))
leaked = backward(ad.sum_(ad.mul(frozen, frozen)))
print("\ngrad reaching A through stop_gradient:", leaked.get(A))

with ad.no_grad():
    silent = ad.matmul(A, v)
print("tensor built under no_grad requires grad:", silent.requires_grad)
