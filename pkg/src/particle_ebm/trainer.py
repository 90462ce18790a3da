"""Training loops: contrastive gradient, optimizers, and particle orchestration.

One :class:`TrainState` is advanced by :func:`train_step`, which dispatches on
the configured method:

``alpha`` / ``beta``
    update ``theta`` with the contrastive gradient, transport every particle
    along :func:`~particle_ebm.samplers.v_alpha` / ``v_beta``, then apply the
    stochastic correction steps against the new energy.
``gamma``
    no parameters; particles follow the kernel field.
``pcd``
    persistent chains refreshed by Langevin steps against the new energy.
``anneal-rb``
    replay buffer with reduced Langevin noise.

Random streams are derived from ``(seed, purpose)`` and, where a value must be
replayable, from ``(seed, purpose, iteration)``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore, kernels, metrics, samplers, targets
from .config import RunConfig
from .diffcore import EnergyModel
from .kernels import KernelSpec
from .metrics import EnergyHistory, EnergyRecord, GridSpec
from .samplers import ParticleEnsemble, ReplayBuffer

# stream tags
_INIT, _DATA, _BATCH, _NOISE, _KERNEL, _EVAL, _MODEL = range(7)


def stream(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


class Optimizer:
    """Plain SGD or bias-corrected Adam on a flat parameter vector (descent)."""

    def __init__(self, kind="adam", lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, size=None):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.lr = kind, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None if size is None else np.zeros(size)
        self.v = None if size is None else np.zeros(size)

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.kind == "sgd":
            return theta - self.lr * grad
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def estimate_kl_grad(data_batch, particle_batch, model: EnergyModel, theta) -> np.ndarray:
    """Gradient of the contrastive loss ``mean_data E - mean_particles E``."""
    data_batch = np.asarray(data_batch, dtype=np.float64)
    particle_batch = np.asarray(particle_batch, dtype=np.float64)
    if len(data_batch) == 0 or len(particle_batch) == 0:
        raise ValueError("data and particle batches must be nonempty")
    X = np.concatenate([data_batch, particle_batch])
    w = np.concatenate(
        [np.full(len(data_batch), 1.0 / len(data_batch)), np.full(len(particle_batch), -1.0 / len(particle_batch))]
    )
    return diffcore.grad_theta_mean(X, theta, model, weights=w)


@dataclass
class TrainState:
    config: RunConfig
    model: EnergyModel
    target: targets.TargetDistribution
    data: np.ndarray
    theta: np.ndarray
    ensemble: ParticleEnsemble
    optimizer: Optimizer
    iteration: int = 0
    kernel: KernelSpec | None = None
    metric_bandwidth: float = 1.0
    buffer: ReplayBuffer | None = None
    history: EnergyHistory = field(default_factory=EnergyHistory)
    gamma_grid: GridSpec | None = None
    gamma_energy: np.ndarray | None = None
    last_batch: np.ndarray | None = None

    @property
    def particles(self) -> np.ndarray:
        """Current negative-phase samples used for evaluation."""
        if self.config.method == "anneal-rb" and self.last_batch is not None:
            return self.last_batch
        return self.ensemble.points


def _kernel_spec(cfg: RunConfig, model: EnergyModel, theta, bandwidth: float) -> KernelSpec | None:
    if cfg.kernel is None:
        return None
    kc = cfg.kernel
    if kc.kind == "rbf":
        return KernelSpec("rbf", bandwidth=bandwidth)
    if kc.kind == "ntk-fixed":
        return KernelSpec("ntk-fixed", model=model, theta=theta.copy())
    return KernelSpec("ntk-averaged-init", model=model, n_draws=kc.n_draws)


def init_state(cfg: RunConfig) -> TrainState:
    """Draw data, initial parameters and initial particles (with burn-in)."""
    cfg = cfg.resolved()
    mc = cfg.model
    model = EnergyModel(mc.kind, dim=mc.dim, hidden=mc.hidden, n_layers=mc.n_layers)
    target = targets.from_config(cfg.target)
    data = targets.sample(target, cfg.n_data, stream(cfg.seed, _DATA))
    theta = model.init_params(stream(cfg.seed, _MODEL))
    oc = cfg.optimizer
    opt = Optimizer(oc.kind, oc.lr, oc.beta1, oc.beta2, oc.eps, size=theta.size)

    rng = stream(cfg.seed, _INIT)
    box = tuple(cfg.metrics.box)
    points = samplers.standard_normal_init(cfg.n_particles, rng, model.dim)
    ens = ParticleEnsemble(points, box=box, rng=stream(cfg.seed, _NOISE))
    if cfg.method != "gamma":
        for _ in range(cfg.burn_in_steps):
            ens.points = samplers.pcd_step(ens.points, model, theta, cfg.langevin_step, rng)
            ens.clamp()
        ens.out_of_box = 0

    # frozen-per-run median bandwidth over initial particles and training data
    probe = np.concatenate([ens.points[:500], data[:500]])
    bw_median = kernels.median_bandwidth(probe)
    bw = bw_median
    if cfg.kernel is not None and cfg.kernel.bandwidth != "median":
        bw = float(cfg.kernel.bandwidth)
    state = TrainState(cfg, model, target, data, theta, ens, opt, metric_bandwidth=bw_median)
    state.kernel = _kernel_spec(cfg, model, theta, bw)
    if cfg.method == "anneal-rb":
        bc = cfg.buffer
        state.buffer = ReplayBuffer.create(
            bc.capacity, rng, model.dim, reinit_prob=bc.reinit_prob, noise_scale=bc.noise_scale
        )
    if cfg.method == "gamma":
        gx, gy = cfg.metrics.gamma_grid
        state.gamma_grid = GridSpec(*box, nx=gx, ny=gy)
        state.gamma_energy = np.zeros(gx * gy)
    return state


def draw_batches(state: TrainState, rng: np.random.Generator):
    """Data batch and negative batch (indices into the ensemble)."""
    cfg = state.config
    n = len(state.ensemble)
    if cfg.full_batch:
        return state.data, np.arange(n)
    m = min(cfg.batch_size, len(state.data))
    data_batch = state.data[rng.choice(len(state.data), size=m, replace=False)]
    pidx = np.arange(n) if cfg.batch_size >= n else rng.choice(n, size=cfg.batch_size, replace=False)
    return data_batch, pidx


def _correct(state: TrainState, theta) -> None:
    cfg = state.config
    ens = state.ensemble
    for _ in range(cfg.correction_steps):
        ens.points = samplers.pcd_step(
            ens.points, state.model, theta, cfg.langevin_step, ens.rng, cfg.correction_noise_scale
        )
        ens.clamp()


def train_step_alpha_beta(state: TrainState, config: RunConfig | None = None) -> TrainState:
    cfg = config or state.config
    rng = stream(cfg.seed, _BATCH, state.iteration)
    data_batch, pidx = draw_batches(state, rng)
    grad = estimate_kl_grad(data_batch, state.ensemble.points[pidx], state.model, state.theta)
    theta_old = state.theta
    theta_new = state.optimizer.step(theta_old, grad)
    if cfg.method == "alpha":
        field_fn = lambda X: samplers.v_alpha(X, state.model, theta_old, theta_new)
    else:
        delta = theta_new - theta_old
        field_fn = lambda X: samplers.v_beta(X, state.model, theta_old, delta)
    state.ensemble = samplers.propagate(state.ensemble, field_fn, cfg.particle_lr)
    state.theta = theta_new
    _correct(state, theta_new)
    state.iteration += 1
    return state


def train_step_gamma(state: TrainState, config: RunConfig | None = None, kernel: KernelSpec | None = None) -> TrainState:
    """Kernel-field step. ``kernel`` overrides the configured kernel (e.g. an
    NTK frozen at externally supplied parameters)."""
    cfg = config or state.config
    rng = stream(cfg.seed, _BATCH, state.iteration)
    data_batch, pidx = draw_batches(state, rng)
    particle_batch = state.ensemble.points[pidx].copy()
    k = kernel if kernel is not None else state.kernel
    kernel_seed = None
    if k.kind == "ntk-averaged-init":
        kernel_seed = int(stream(cfg.seed, _KERNEL, state.iteration).integers(2**63))
        record_kernel = k
        k = k.redraw(np.random.default_rng(kernel_seed))
    else:
        record_kernel = k
    field_fn = lambda X: samplers.v_gamma(X, data_batch, particle_batch, k)
    state.ensemble = samplers.propagate(state.ensemble, field_fn, cfg.particle_lr)
    _correct(state, state.theta)
    rec = EnergyRecord(data_batch, particle_batch, record_kernel, cfg.particle_lr, kernel_seed)
    state.history.append(rec)
    if state.gamma_grid is not None:
        state.gamma_energy += rec.step * metrics.energy_rate(rec, state.gamma_grid.points())
    state.iteration += 1
    return state


def train_step_pcd(state: TrainState, config: RunConfig | None = None) -> TrainState:
    """PCD: gradient on persistent chains, then refresh those chains by
    Langevin steps against the updated energy."""
    cfg = config or state.config
    rng = stream(cfg.seed, _BATCH, state.iteration)
    data_batch, pidx = draw_batches(state, rng)
    ens = state.ensemble
    grad = estimate_kl_grad(data_batch, ens.points[pidx], state.model, state.theta)
    state.theta = state.optimizer.step(state.theta, grad)
    chains = ens.points[pidx]
    for _ in range(cfg.langevin_steps):
        chains = samplers.pcd_step(chains, state.model, state.theta, cfg.langevin_step, ens.rng)
    points = ens.points.copy()
    points[pidx] = chains
    ens.points = points
    ens.clamp()
    ens.step_count += 1
    state.iteration += 1
    return state


def train_step_replay(state: TrainState, config: RunConfig | None = None) -> TrainState:
    """Annealed replay buffer: draw (with reinitialization), run reduced-noise
    Langevin against the current energy, write back, then update ``theta``."""
    cfg = config or state.config
    rng = stream(cfg.seed, _BATCH, state.iteration)
    buf = state.buffer
    m = min(cfg.batch_size, buf.capacity)
    data_batch = state.data[rng.choice(len(state.data), size=min(m, len(state.data)), replace=False)]
    neg, idx = samplers.replay_buffer_draw(buf, m, rng)
    noise_rng = state.ensemble.rng
    for _ in range(cfg.langevin_steps):
        neg = samplers.pcd_step(neg, state.model, state.theta, cfg.langevin_step, noise_rng, buf.noise_scale)
    tmp = ParticleEnsemble(neg, box=state.ensemble.box)
    state.ensemble.out_of_box += tmp.clamp()
    neg = tmp.points
    buf.write_back(idx, neg)
    state.last_batch = neg
    grad = estimate_kl_grad(data_batch, neg, state.model, state.theta)
    state.theta = state.optimizer.step(state.theta, grad)
    state.iteration += 1
    return state


def train_step(state: TrainState) -> TrainState:
    method = state.config.method
    if method in ("alpha", "beta"):
        return train_step_alpha_beta(state)
    if method == "gamma":
        return train_step_gamma(state)
    if method == "pcd":
        return train_step_pcd(state)
    return train_step_replay(state)


# ---------------------------------------------------------------------------
# evaluation


METRIC_COLUMNS = (
    "iteration",
    "loglik",
    "mmd2_rbf_biased",
    "mmd2_rbf_unbiased",
    "mode_coverage",
    "out_of_box_count",
    "wall_ms",
)


def evaluation_grid(state: TrainState) -> GridSpec:
    nx, ny = state.config.metrics.grid
    return GridSpec(*state.config.metrics.box, nx=nx, ny=ny)


def energy_on_grid(state: TrainState, grid: GridSpec) -> np.ndarray:
    """Current energy on ``grid`` as an ``(ny, nx)`` array."""
    if state.config.method == "gamma":
        if grid == state.gamma_grid:
            return state.gamma_energy.reshape(grid.ny, grid.nx).copy()
        return metrics.integrate_energy_gamma(state.history, grid)
    return diffcore.energy(grid.points(), state.theta, state.model).reshape(grid.ny, grid.nx)


def evaluate(state: TrainState, wall_ms: float = 0.0) -> dict:
    """One metrics row: log-likelihood and MMD^2 against a fresh target batch."""
    cfg = state.config
    parts = state.particles
    fresh = targets.sample(state.target, len(parts), stream(cfg.seed, _EVAL, state.iteration))
    if cfg.method == "gamma":
        loglik = metrics.avg_log_likelihood_grid(fresh, state.gamma_energy, state.gamma_grid)
    else:
        loglik = metrics.avg_log_likelihood(fresh, state.model, state.theta, evaluation_grid(state))
    k = KernelSpec("rbf", bandwidth=state.metric_bandwidth)
    if state.target.kind == "single-gaussian":
        coverage = float("nan")
    else:
        coverage = metrics.mode_coverage(parts, state.target, cfg.metrics.mode_radius, cfg.metrics.mode_min_frac)[0]
    return {
        "iteration": state.iteration,
        "loglik": loglik,
        "mmd2_rbf_biased": kernels.mmd2_vstat(k, parts, fresh),
        "mmd2_rbf_unbiased": kernels.mmd2_ustat(k, parts, fresh) if len(parts) > 1 else float("nan"),
        "mode_coverage": coverage,
        "out_of_box_count": state.ensemble.out_of_box,
        "wall_ms": wall_ms if cfg.log_wall_time else 0.0,
    }


def train(state: TrainState, iterations: int | None = None, on_log=None, stop=None) -> TrainState:
    """Advance ``state`` by ``iterations`` steps (default: remaining ones).

    ``on_log(state, row)`` is called at iteration 0 (if fresh) and every
    ``log_interval`` steps; ``stop(state, row)`` returning true ends early.
    """
    cfg = state.config
    total = cfg.iterations if iterations is None else state.iteration + iterations
    t0 = time.perf_counter()

    def log():
        row = evaluate(state, 1e3 * (time.perf_counter() - t0))
        if on_log is not None:
            on_log(state, row)
        return row

    if state.iteration == 0:
        row = log()
        if stop is not None and stop(state, row):
            return state
    while state.iteration < total:
        train_step(state)
        if state.iteration % cfg.log_interval == 0 or state.iteration == total:
            row = log()
            if stop is not None and stop(state, row):
                break
    return state
