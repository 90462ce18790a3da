"""Analytic 2-D target densities (Gaussian mixtures).

Each target supports exact sampling, a log-sum-exp stable log-density and the
exact score ``grad_x log p``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

TARGET_KINDS = ("gaussian-ring-mixture", "grid-mixture", "single-gaussian")

#: Quadrature / plotting box for the default targets.
SUPPORT_BOX = (-6.0, 6.0, -6.0, 6.0)


@dataclass(frozen=True)
class TargetDistribution:
    kind: str
    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ValueError(f"unknown target kind {self.kind!r}")
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64).reshape(len(means), means.shape[1], means.shape[1])
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (len(means),) or np.any(weights <= 0):
            raise ValueError("weights must be positive, one per component")
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {weights.sum()!r}, expected 1")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), rtol=0, atol=0):
            raise ValueError("covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(covs) <= 0):
            raise ValueError("covariances must be positive definite")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.means)


def single_gaussian(mean=(0.0, 0.0), cov=None) -> TargetDistribution:
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.eye(len(mean)) if cov is None else np.asarray(cov, dtype=np.float64)
    return TargetDistribution("single-gaussian", mean[None], cov[None], np.ones(1))


def ring_mixture(n_modes: int = 8, radius: float = 4.0, sigma: float = 0.3) -> TargetDistribution:
    """Equal-weight isotropic Gaussians evenly spaced on a circle."""
    angles = 2.0 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    covs = np.broadcast_to(sigma**2 * np.eye(2), (n_modes, 2, 2)).copy()
    return TargetDistribution("gaussian-ring-mixture", means, covs, np.full(n_modes, 1.0 / n_modes))


def grid_mixture(n_per_side: int = 5, spacing: float = 2.0, sigma: float = 0.3) -> TargetDistribution:
    """Equal-weight isotropic Gaussians on a centered square lattice."""
    ticks = spacing * (np.arange(n_per_side) - (n_per_side - 1) / 2.0)
    gx, gy = np.meshgrid(ticks, ticks, indexing="ij")
    means = np.stack([gx.ravel(), gy.ravel()], axis=1)
    k = len(means)
    covs = np.broadcast_to(sigma**2 * np.eye(2), (k, 2, 2)).copy()
    return TargetDistribution("grid-mixture", means, covs, np.full(k, 1.0 / k))


NAMED_TARGETS = {
    "ring8": ring_mixture,
    "grid25": grid_mixture,
    "gaussian": single_gaussian,
}


def from_config(spec) -> TargetDistribution:
    """Build a target from a name (``"ring8"``) or a mapping.

    Mapping form: ``{kind: ..., components: [{mean: [..], cov: [[..],[..]], weight: w}, ...]}``
    or ``{name: ring8, radius: 3.0, ...}`` forwarding keyword arguments.
    """
    if isinstance(spec, str):
        if spec not in NAMED_TARGETS:
            raise ValueError(f"unknown target name {spec!r}; known: {sorted(NAMED_TARGETS)}")
        return NAMED_TARGETS[spec]()
    spec = dict(spec)
    if "name" in spec:
        name = spec.pop("name")
        if name not in NAMED_TARGETS:
            raise ValueError(f"unknown target name {name!r}; known: {sorted(NAMED_TARGETS)}")
        return NAMED_TARGETS[name](**spec)
    comps = spec["components"]
    return TargetDistribution(
        spec["kind"],
        np.array([c["mean"] for c in comps], dtype=np.float64),
        np.array([c["cov"] for c in comps], dtype=np.float64),
        np.array([c["weight"] for c in comps], dtype=np.float64),
    )


def sample(dist: TargetDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` i.i.d. points, shape ``(n, d)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    comp = rng.choice(dist.n_components, size=n, p=dist.weights)
    z = rng.standard_normal((n, dist.dim))
    chol = np.linalg.cholesky(dist.covs)
    return dist.means[comp] + np.einsum("nij,nj->ni", chol[comp], z)


def _component_terms(dist, xb):
    # log(w_k N_k(x)) for every point/component, plus the precision-weighted residuals
    prec = np.linalg.inv(dist.covs)
    r = xb[:, None, :] - dist.means[None]
    pr = np.einsum("kij,nkj->nki", prec, r)
    maha = np.sum(r * pr, axis=-1)
    _, logdet = np.linalg.slogdet(dist.covs)
    log_terms = np.log(dist.weights) - 0.5 * (maha + logdet + dist.dim * np.log(2.0 * np.pi))
    return log_terms, pr


def log_pdf(dist: TargetDistribution, x):
    x = np.asarray(x, dtype=np.float64)
    xb = x[None] if x.ndim == 1 else x
    log_terms, _ = _component_terms(dist, xb)
    out = logsumexp(log_terms, axis=1)
    return float(out[0]) if x.ndim == 1 else out


def score(dist: TargetDistribution, x):
    """``grad_x log p(x)``: responsibility-weighted component scores."""
    x = np.asarray(x, dtype=np.float64)
    xb = x[None] if x.ndim == 1 else x
    log_terms, pr = _component_terms(dist, xb)
    resp = softmax(log_terms, axis=1)
    out = -np.einsum("nk,nki->ni", resp, pr)
    return out[0] if x.ndim == 1 else out
