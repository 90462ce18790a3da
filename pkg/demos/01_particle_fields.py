"""
Three ways to move particles along with a changing energy
=========================================================

A single parameter update changes the model density. This script computes
the three particle fields for one contrastive SGD step on a small network
and checks how they relate:

* ``v_alpha`` differences the x-gradients of the old and new energies,
* ``v_beta`` linearizes that difference in the parameter step,
* ``v_gamma`` with the neural tangent kernel of the current parameters
  reproduces ``v_beta`` exactly once scaled by the learning rate.

Run with ``python demos/01_particle_fields.py``.
"""

import numpy as np

from particle_ebm import diffcore, samplers, targets
from particle_ebm.kernels import KernelSpec

rng = np.random.default_rng(0)
model = diffcore.EnergyModel(hidden=64)
theta = model.init_params(rng)

ring = targets.ring_mixture()
data = targets.sample(ring, 128, rng)
particles = rng.standard_normal((128, 2))

# one plain SGD step on the contrastive loss
lr = 0.05
grad = diffcore.grad_theta_mean(data, theta, model) - diffcore.grad_theta_mean(particles, theta, model)
theta_new = theta - lr * grad

probe = rng.standard_normal((5, 2))
va = samplers.v_alpha(probe, model, theta, theta_new)
vb = samplers.v_beta(probe, model, theta, theta_new - theta)
vg = samplers.v_gamma(probe, data, particles, KernelSpec("ntk-fixed", model=model, theta=theta))

print("v_alpha:\n", np.round(va, 5))
print("v_beta:\n", np.round(vb, 5))
print("lr * v_gamma (NTK):\n", np.round(lr * vg, 5))

# alpha and beta agree to first order in the step ...
print("|alpha - beta| / |beta| =", np.linalg.norm(va - vb) / np.linalg.norm(vb))
# ... and beta is the NTK kernel field up to rounding
print("|beta - lr*gamma| / |beta| =", np.linalg.norm(vb - lr * vg) / np.linalg.norm(vb))

# halving the step makes the alpha/beta gap four times smaller
for s in (1.0, 0.5, 0.25):
    d = s * (theta_new - theta)
    gap = np.linalg.norm(samplers.v_alpha(probe, model, theta, theta + d) - samplers.v_beta(probe, model, theta, d))
    print(f"step scale {s:5.2f}: gap {gap:.3e}")
