"""Kernels, their input gradients, and MMD estimators.

Three kernel kinds share one interface:

``rbf``
    ``k(x, y) = exp(-||x - y||^2 / (2 h^2))``.
``ntk-fixed``
    ``k(x, y) = <grad_theta E(x, theta), grad_theta E(y, theta)>`` at a fixed ``theta``.
``ntk-averaged-init``
    the fixed NTK averaged over ``M`` parameter draws ``theta ~ pi_0``.

Gram matrices and their gradients are computed batched. For MLP energies the
NTK is assembled layer by layer from forward activations and backprop signals
(``<a (x) d, a' (x) d'> = (a . a') (d . d')``), so the ``P``-dimensional
parameter gradients are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import diffcore
from .diffcore import EnergyModel

KERNEL_KINDS = ("rbf", "ntk-fixed", "ntk-averaged-init")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel description.

    For ``ntk-averaged-init`` the parameter draws are fixed by ``thetas``
    (an ``(M, P)`` array); :meth:`redraw` produces a spec with fresh draws so
    that every pairwise term of one field evaluation shares them.
    """

    kind: str = "rbf"
    bandwidth: float = 1.0
    model: EnergyModel | None = None
    theta: np.ndarray | None = None
    thetas: np.ndarray | None = None
    n_draws: int = 1

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}; expected one of {KERNEL_KINDS}")
        if self.kind == "rbf" and not self.bandwidth > 0:
            raise ValueError("rbf bandwidth must be positive")
        if self.kind != "rbf" and self.model is None:
            raise ValueError(f"{self.kind} kernel needs an energy model")
        if self.kind == "ntk-fixed" and self.theta is None:
            raise ValueError("ntk-fixed kernel needs theta")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")

    def redraw(self, rng: np.random.Generator) -> "KernelSpec":
        if self.kind != "ntk-averaged-init":
            return self
        thetas = np.stack([self.model.init_params(rng) for _ in range(self.n_draws)])
        return replace(self, thetas=thetas)

    def _param_sets(self):
        if self.kind == "ntk-fixed":
            return [self.theta]
        if self.thetas is None:
            raise ValueError("ntk-averaged-init kernel has no parameter draws; call redraw(rng)")
        return list(self.thetas)


def median_bandwidth(X, Y=None) -> float:
    """Median pairwise distance over the union of ``X`` and ``Y``."""
    Z = np.asarray(X, dtype=np.float64)
    if Y is not None:
        Z = np.concatenate([Z, np.asarray(Y, dtype=np.float64)])
    if len(Z) < 2:
        return 1.0
    h = float(np.median(pdist(Z)))
    return h if h > 0 else 1.0


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _check_dims(X, Y):
    if X.shape[1] != Y.shape[1]:
        raise ValueError(f"dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")


# ---------------------------------------------------------------------------
# NTK building blocks


def _ntk_gram_single(X, Y, theta, model):
    if model.kind != "mlp":
        return diffcore.grad_theta(X, theta, model) @ diffcore.grad_theta(Y, theta, model).T
    p = model.layout.unflatten(theta)
    fx = diffcore.mlp_pass(X, p, model.n_layers)
    fy = diffcore.mlp_pass(Y, p, model.n_layers)
    K = fx.hidden_out @ fy.hidden_out.T + 1.0
    for l in range(model.n_layers):
        dd = fx.deltas[l] @ fy.deltas[l].T
        K += dd * (fx.inputs[l] @ fy.inputs[l].T) + dd
    return K


def _ntk_gram_grad_single(X, Y, theta, model):
    """``G[i, j, :] = grad_x k(x_i, y_j)`` for one parameter setting."""
    if model.kind != "mlp":
        # <d/dx_c grad_theta E(x), grad_theta E(y)> = d/dx_c <grad_theta E(x), u> with u = grad_theta E(y)
        gy = diffcore.grad_theta(Y, theta, model)
        out = np.empty((X.shape[0], Y.shape[0], X.shape[1]))
        for j, u in enumerate(gy):
            out[:, j, :] = diffcore.grad_x_param_dot(X, theta, u, model)
        return out
    p = model.layout.unflatten(theta)
    fx = diffcore.mlp_pass(X, p, model.n_layers)
    fy = diffcore.mlp_pass(Y, p, model.n_layers)
    dinputs, ddeltas, dhidden = diffcore.mlp_x_tangents(fx, model.n_layers, model.dim)
    # leading axis of the tangents is the input direction
    G = dhidden @ fy.hidden_out.T
    for l in range(model.n_layers):
        dd = fx.deltas[l] @ fy.deltas[l].T
        aa = fx.inputs[l] @ fy.inputs[l].T
        ddd = ddeltas[l] @ fy.deltas[l].T
        G += ddd * aa + dd * (dinputs[l] @ fy.inputs[l].T) + ddd
    return np.moveaxis(G, 0, -1)


# ---------------------------------------------------------------------------
# Public operations


def gram(k: KernelSpec, X, Y) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(x_i, y_j)``."""
    X, _ = _batch(X)
    Y, _ = _batch(Y)
    _check_dims(X, Y)
    if k.kind == "rbf":
        return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * k.bandwidth**2))
    sets = k._param_sets()
    return sum(_ntk_gram_single(X, Y, th, k.model) for th in sets) / len(sets)


def grad_x_gram(k: KernelSpec, X, Y) -> np.ndarray:
    """Gradients with respect to the first argument, shape ``(n, m, d)``."""
    X, _ = _batch(X)
    Y, _ = _batch(Y)
    _check_dims(X, Y)
    if k.kind == "rbf":
        diff = X[:, None, :] - Y[None, :, :]
        K = np.exp(-np.sum(diff * diff, axis=-1) / (2.0 * k.bandwidth**2))
        return -(diff / k.bandwidth**2) * K[:, :, None]
    sets = k._param_sets()
    return sum(_ntk_gram_grad_single(X, Y, th, k.model) for th in sets) / len(sets)


def mean_grad_x(k: KernelSpec, X, Y) -> np.ndarray:
    """``mean_j grad_x k(x_i, y_j)`` for each ``x_i``, shape ``(n, d)``.

    Cheaper than averaging :func:`grad_x_gram` for the NTK kinds: by
    linearity the mean over ``Y`` folds into one parameter direction.
    """
    Xb, single = _batch(X)
    Y, _ = _batch(Y)
    _check_dims(Xb, Y)
    if k.kind == "rbf":
        K = gram(k, Xb, Y)
        out = -(Xb * K.sum(axis=1, keepdims=True) - K @ Y) / (k.bandwidth**2 * Y.shape[0])
    else:
        sets = k._param_sets()
        out = sum(
            diffcore.grad_x_param_dot(Xb, th, diffcore.grad_theta_mean(Y, th, k.model), k.model)
            for th in sets
        ) / len(sets)
    return out[0] if single else out


def eval(k: KernelSpec, x, y) -> float:
    """Kernel value for a single pair of points."""
    return float(gram(k, x, y)[0, 0])


def grad_x_eval(k: KernelSpec, x, y) -> np.ndarray:
    """Gradient of ``k(x, y)`` with respect to ``x``."""
    return grad_x_gram(k, x, y)[0, 0]


def _nonempty(*sets):
    for s in sets:
        if len(s) == 0:
            raise ValueError("sample sets must be nonempty")


def _order_key(A):
    return (A.shape, A.tobytes())


def mmd2_vstat(k: KernelSpec, X, Y) -> float:
    """Biased (V-statistic) squared MMD, diagonal terms included."""
    _nonempty(X, Y)
    X, _ = _batch(X)
    Y, _ = _batch(Y)
    if _order_key(Y) < _order_key(X):
        X, Y = Y, X  # canonical argument order makes the value exactly symmetric
    kxx = gram(k, X, X).mean()
    kyy = gram(k, Y, Y).mean()
    kxy = gram(k, X, Y).mean()
    return float(kxx + kyy - 2.0 * kxy)


def mmd2_ustat(k: KernelSpec, X, Y) -> float:
    """Unbiased (U-statistic) squared MMD; needs at least two points per set."""
    X, _ = _batch(X)
    Y, _ = _batch(Y)
    m, n = len(X), len(Y)
    if m < 2 or n < 2:
        raise ValueError("U-statistic needs at least two points per set")
    Kxx = gram(k, X, X)
    Kyy = gram(k, Y, Y)
    a = (Kxx.sum() - np.trace(Kxx)) / (m * (m - 1))
    b = (Kyy.sum() - np.trace(Kyy)) / (n * (n - 1))
    return float(a + b - 2.0 * gram(k, X, Y).mean())


def kl_descent_identity_check(k: KernelSpec, X_p, X_q) -> tuple[float, float]:
    """Both sides of ``dKL/dt = E_p[dE/dt] - E_q[dE/dt] = -MMD^2``.

    The energy rate ``dE/dt(x') = mean_q k(., x') - mean_p k(., x')`` is
    evaluated on each sample set and averaged (left side); the right side is
    ``-mmd2_vstat``.
    """
    _nonempty(X_p, X_q)
    X_p, _ = _batch(X_p)
    X_q, _ = _batch(X_q)
    # rate[x'] for x' in each set; columns index x'
    rate_on_p = gram(k, X_q, X_p).mean(axis=0) - gram(k, X_p, X_p).mean(axis=0)
    rate_on_q = gram(k, X_q, X_q).mean(axis=0) - gram(k, X_p, X_q).mean(axis=0)
    lhs = float(rate_on_p.mean() - rate_on_q.mean())
    return lhs, -mmd2_vstat(k, X_p, X_q)
