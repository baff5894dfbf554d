"""Check the hand-written backward pass against central differences.

Builds a small extractor and classifier, evaluates the combined local loss on a
random batch and compares the analytic gradient w.r.t. the extractor weights
with a finite-difference estimate.
"""
import numpy as np

from fedpall.losses import LossWeights, combined_local_loss
from fedpall.neural import MlpSpec, backward_mlp, forward_mlp, init_mlp, make_rng
from fedpall.prototypes import PrototypeSet

rng = np.random.default_rng(0)
extractor = init_mlp(MlpSpec((6, 10, 8, 5)), make_rng(0, 1))
classifier = init_mlp(MlpSpec((5, 8, 3)), make_rng(0, 2))
amplifier = init_mlp(MlpSpec((5, 8, 4)), make_rng(0, 3))
prototypes = PrototypeSet(rng.normal(size=(3, 5)), np.full(3, 10))
weights = LossWeights(mu=0.7, delta=0.3, tau=0.5)

x = rng.normal(size=(16, 6))
y = rng.integers(0, 3, size=16)


def loss_at(flat):
    z, _ = forward_mlp(extractor.with_flat(flat), x)
    return combined_local_loss(z, y, classifier, amplifier, prototypes, weights).value


z, cache = forward_mlp(extractor, x, cache=True)
loss = combined_local_loss(z, y, classifier, amplifier, prototypes, weights)
grads, _ = backward_mlp(extractor, cache, loss.grad_features)
analytic = grads.flatten()

theta = extractor.flatten()
h = 1e-5
numeric = np.empty_like(theta)
for i in range(theta.size):
    step = np.zeros_like(theta)
    step[i] = h
    numeric[i] = (loss_at(theta + step) - loss_at(theta - step)) / (2 * h)

print(f"loss = {loss.value:.6f}  (ce {loss.ce:.4f}, kl {loss.kl:.4f}, infonce {loss.nce:.4f})")
print(f"{theta.size} parameters, max |analytic - numeric| = {np.max(np.abs(analytic - numeric)):.2e}")
print(f"relative error = {np.max(np.abs(analytic - numeric)) / np.max(np.abs(numeric)):.2e}")
