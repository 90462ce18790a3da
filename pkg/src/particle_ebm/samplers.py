"""Particle update rules.

The deterministic fields absorb the ``1/dt`` factor, so a propagation step is
``x <- x + particle_lr * v(x)``:

* :func:`v_alpha` -- difference of consecutive energy gradients,
* :func:`v_beta` -- directional derivative of ``grad_x E`` along the parameter update,
* :func:`v_gamma` -- kernel attraction to data minus repulsion between particles.

Stochastic baselines (Langevin, PCD, replay buffer) live here as well.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore, kernels
from .diffcore import EnergyModel
from .kernels import KernelSpec
from .targets import SUPPORT_BOX


class DivergenceError(FloatingPointError):
    """A particle field produced a non-finite value."""

    def __init__(self, index: int, message: str | None = None):
        self.index = index
        super().__init__(message or f"non-finite field value at particle {index}")


def v_alpha(x, model: EnergyModel, theta_old, theta_new):
    """``-grad_x E(x, theta_new) + grad_x E(x, theta_old)``."""
    return diffcore.grad_x(x, theta_old, model) - diffcore.grad_x(x, theta_new, model)


def v_beta(x, model: EnergyModel, theta, delta_theta):
    """``-grad_x <grad_theta E(x, theta), delta_theta>``."""
    return -diffcore.grad_x_param_dot(x, theta, delta_theta, model)


def v_gamma(x, data_batch, particle_batch, k: KernelSpec):
    """Mean kernel gradient towards the data minus the mean towards the particles."""
    if len(data_batch) == 0 or len(particle_batch) == 0:
        raise ValueError("data and particle batches must be nonempty")
    return kernels.mean_grad_x(k, x, data_batch) - kernels.mean_grad_x(k, x, particle_batch)


def v_gamma_repulsion(x, particle_batch, k: KernelSpec):
    """Repulsion part of :func:`v_gamma` alone (no data attraction)."""
    return -kernels.mean_grad_x(k, x, particle_batch)


def langevin_step(x, score_fn, step: float, rng: np.random.Generator, noise_scale: float = 1.0):
    """``x + step/2 * score(x) + noise_scale * sqrt(step) * z``."""
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=np.float64)
    z = rng.standard_normal(x.shape)
    return x + 0.5 * step * score_fn(x) + noise_scale * np.sqrt(step) * z


def pcd_step(x, model: EnergyModel, theta_new, step: float, rng: np.random.Generator, noise_scale: float = 1.0):
    """One Langevin step targeting ``q(x) ~ exp(-E(x, theta_new))``."""
    return langevin_step(x, lambda y: -diffcore.grad_x(y, theta_new, model), step, rng, noise_scale)


def standard_normal_init(n: int, rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    return rng.standard_normal((n, dim))


@dataclass
class ReplayBuffer:
    """Fixed-capacity store of past negatives with random reinitialization."""

    storage: np.ndarray
    reinit_prob: float = 0.05
    noise_scale: float = 0.1
    init_sampler: object = standard_normal_init

    def __post_init__(self):
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise ValueError("reinit_prob must lie in [0, 1]")
        if not 0.0 < self.noise_scale <= 1.0:
            raise ValueError("noise_scale must lie in (0, 1]")
        self.storage = np.asarray(self.storage, dtype=np.float64)

    @property
    def capacity(self) -> int:
        return len(self.storage)

    @classmethod
    def create(cls, capacity: int, rng: np.random.Generator, dim: int = 2, **kw) -> "ReplayBuffer":
        init = kw.get("init_sampler", standard_normal_init)
        return cls(init(capacity, rng, dim), **kw)

    def write_back(self, indices, points) -> None:
        self.storage[np.asarray(indices)] = points


def replay_buffer_draw(buf: ReplayBuffer, m: int, rng: np.random.Generator):
    """Draw ``m`` distinct slots; each is independently replaced by a fresh
    initial sample with probability ``reinit_prob``.

    Returns ``(points, indices)``; write refined points back with
    :meth:`ReplayBuffer.write_back`.
    """
    if m > buf.capacity:
        raise ValueError(f"cannot draw {m} points from a buffer of capacity {buf.capacity}")
    idx = rng.choice(buf.capacity, size=m, replace=False)
    pts = buf.storage[idx].copy()
    fresh = rng.random(m) < buf.reinit_prob
    n_fresh = int(fresh.sum())
    if n_fresh:
        pts[fresh] = buf.init_sampler(n_fresh, rng, buf.storage.shape[1])
    return pts, idx


@dataclass
class ParticleEnsemble:
    points: np.ndarray
    step_count: int = 0
    out_of_box: int = 0
    box: tuple = SUPPORT_BOX
    rng: np.random.Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("particles must be finite")

    def __len__(self) -> int:
        return len(self.points)

    def clamp(self) -> int:
        """Clamp points to the support box; returns how many were outside."""
        lo = np.array(self.box[0::2])
        hi = np.array(self.box[1::2])
        outside = np.any((self.points < lo) | (self.points > hi), axis=1)
        n_out = int(outside.sum())
        if n_out:
            self.points = np.clip(self.points, lo, hi)
            self.out_of_box += n_out
        return n_out


def propagate(ensemble: ParticleEnsemble, field_fn, dt: float) -> ParticleEnsemble:
    """Synchronous Euler step ``x + dt * field(x)`` for every particle.

    ``field_fn`` receives the full ``(n, d)`` snapshot and must return the
    field at each point. The result is clamped to the ensemble's support box.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    snapshot = ensemble.points.copy()
    v = np.asarray(field_fn(snapshot), dtype=np.float64)
    bad = ~np.all(np.isfinite(v), axis=1)
    if bad.any():
        raise DivergenceError(int(np.argmax(bad)))
    out = ParticleEnsemble(snapshot + dt * v, ensemble.step_count + 1, ensemble.out_of_box, ensemble.box, ensemble.rng)
    out.clamp()
    return out
