"""Evaluation on a 2-D grid: partition function, log-likelihood, mode coverage,
and energy reconstruction for the kernel (gamma) dynamics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import diffcore, kernels
from .kernels import KernelSpec
from .targets import TargetDistribution


@dataclass(frozen=True)
class GridSpec:
    xmin: float = -6.0
    xmax: float = 6.0
    ymin: float = -6.0
    ymax: float = 6.0
    nx: int = 400
    ny: int = 400

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("grid needs at least 2 nodes per axis")
        lims = (self.xmin, self.xmax, self.ymin, self.ymax)
        if not np.all(np.isfinite(lims)) or self.xmax <= self.xmin or self.ymax <= self.ymin:
            raise ValueError("grid ranges must be finite with positive length")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.xmin, self.xmax, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.ymin, self.ymax, self.ny)

    def points(self) -> np.ndarray:
        """Grid nodes, shape ``(ny * nx, 2)``, row-major with y as the row index."""
        gx, gy = np.meshgrid(self.xs, self.ys)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    def log_weights(self) -> np.ndarray:
        """Log trapezoid weights matching :meth:`points`."""
        wx = np.full(self.nx, (self.xmax - self.xmin) / (self.nx - 1))
        wy = np.full(self.ny, (self.ymax - self.ymin) / (self.ny - 1))
        wx[[0, -1]] *= 0.5
        wy[[0, -1]] *= 0.5
        return np.log(np.outer(wy, wx)).ravel()


def log_partition_grid(energy_fn, grid: GridSpec) -> float:
    """``log int exp(-E)`` over the grid box by the trapezoid rule.

    ``energy_fn`` maps an ``(N, 2)`` array of points to ``(N,)`` energies.
    """
    e = np.asarray(energy_fn(grid.points()), dtype=np.float64)
    return log_partition_from_values(e, grid)


def log_partition_from_values(energies, grid: GridSpec) -> float:
    e = np.asarray(energies, dtype=np.float64).ravel()
    if e.shape != (grid.nx * grid.ny,):
        raise ValueError("energy values do not match grid size")
    if not np.all(np.isfinite(e)):
        raise ValueError("energy is not finite on the grid")
    return float(logsumexp(-e + grid.log_weights()))


def avg_log_likelihood(data, model, theta, grid: GridSpec) -> float:
    """Mean of ``-E(x) - log Z`` over the data, ``Z`` from grid quadrature."""
    data = np.asarray(data, dtype=np.float64)
    if len(data) == 0:
        raise ValueError("data must be nonempty")
    log_z = log_partition_grid(lambda pts: diffcore.energy(pts, theta, model), grid)
    return float(-np.mean(diffcore.energy(data, theta, model)) - log_z)


def avg_log_likelihood_grid(data, energy_grid, grid: GridSpec) -> float:
    """Log-likelihood for an energy known only on grid nodes (bilinear interpolation)."""
    from scipy.interpolate import RegularGridInterpolator

    values = np.asarray(energy_grid, dtype=np.float64).reshape(grid.ny, grid.nx)
    log_z = log_partition_from_values(values, grid)
    interp = RegularGridInterpolator((grid.ys, grid.xs), values, bounds_error=False, fill_value=None)
    data = np.asarray(data, dtype=np.float64)
    return float(-np.mean(interp(data[:, ::-1])) - log_z)


@dataclass
class EnergyRecord:
    """One gamma iteration: the batches used, the kernel (with its parameter
    draws) and the particle step size."""

    data: np.ndarray
    particles: np.ndarray
    kernel: KernelSpec
    step: float
    kernel_seed: int | None = None


@dataclass
class EnergyHistory:
    records: list[EnergyRecord] = field(default_factory=list)

    def append(self, record: EnergyRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)


def energy_rate(record: EnergyRecord, points) -> np.ndarray:
    """``dE/dt`` at ``points``: mean kernel to particles minus mean kernel to data.

    Averaged-init kernels stored without draws are redrawn from the record's
    ``kernel_seed``, reproducing the draws used during training.
    """
    k = record.kernel
    if k.kind == "ntk-averaged-init" and k.thetas is None:
        if record.kernel_seed is None:
            raise ValueError("averaged-init record needs either parameter draws or a kernel_seed")
        k = k.redraw(np.random.default_rng(record.kernel_seed))
    return kernels.gram(k, points, record.particles).mean(axis=1) - kernels.gram(
        k, points, record.data
    ).mean(axis=1)


def integrate_energy_gamma(history: EnergyHistory, grid: GridSpec, k: KernelSpec | None = None) -> np.ndarray:
    """Accumulate ``E_T = sum_t dt * dE/dt`` on the grid, starting from ``E_0 = 0``.

    Returns an ``(ny, nx)`` array. ``k`` overrides the kernel stored in the
    records (useful for rbf runs); NTK records keep their own parameter draws.
    """
    pts = grid.points()
    total = np.zeros(len(pts))
    for t, rec in enumerate(history.records):
        if rec is None:
            raise ValueError(f"history record {t} is missing")
        if k is not None and k.kind == "rbf":
            rec = EnergyRecord(rec.data, rec.particles, k, rec.step, rec.kernel_seed)
        total += rec.step * energy_rate(rec, pts)
    return total.reshape(grid.ny, grid.nx)


def mode_coverage(particles, dist: TargetDistribution, radius: float | None = None, min_frac: float = 0.01):
    """Count mixture components holding at least ``min_frac`` of the particles
    within ``radius`` of their mean.

    ``radius`` defaults to three standard deviations of each component (the
    square root of the largest covariance eigenvalue).
    """
    if dist.kind == "single-gaussian":
        raise ValueError("mode coverage needs a mixture target")
    particles = np.asarray(particles, dtype=np.float64)
    if radius is None:
        radii = 3.0 * np.sqrt(np.linalg.eigvalsh(dist.covs)[:, -1])
    else:
        radii = np.full(dist.n_components, float(radius))
    dists = np.linalg.norm(particles[:, None, :] - dist.means[None], axis=-1)
    frac = np.mean(dists <= radii[None, :], axis=0)
    covered = int(np.sum(frac >= min_frac))
    return covered, dist.n_components


# ---------------------------------------------------------------------------
# grid text format: header "nx ny xmin xmax ymin ymax", then ny rows of nx values


def write_grid(path, values, grid: GridSpec) -> None:
    values = np.asarray(values, dtype=np.float64).reshape(grid.ny, grid.nx)
    with open(path, "w") as fh:
        fh.write(f"{grid.nx} {grid.ny} {grid.xmin!r} {grid.xmax!r} {grid.ymin!r} {grid.ymax!r}\n")
        for row in values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_grid(path) -> tuple[np.ndarray, GridSpec]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty grid file")
    head = lines[0].split()
    if len(head) != 6:
        raise ValueError(f"{path}: header must be 'nx ny xmin xmax ymin ymax'")
    try:
        nx, ny = int(head[0]), int(head[1])
        grid = GridSpec(float(head[2]), float(head[3]), float(head[4]), float(head[5]), nx, ny)
        rows = [[float(v) for v in ln.split()] for ln in lines[1:]]
    except ValueError as exc:
        raise ValueError(f"{path}: malformed grid file ({exc})") from None
    if len(rows) != ny or any(len(r) != nx for r in rows):
        raise ValueError(f"{path}: expected {ny} rows of {nx} values")
    return np.array(rows), grid
