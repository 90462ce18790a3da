"""Config-driven runner: single runs, seed sweeps, heatmap rendering.

Every run writes into its own directory ``{method}-{digest}-s{seed}`` below
the output root (``PARTICLE_EBM_OUTPUT_ROOT`` if set, else the config's
``output_dir``). An existing directory is never reused; a ``-v2``, ``-v3``...
suffix is appended instead.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from . import metrics, trainer
from ._runtime import tune_allocator
from .config import ConfigError, RunConfig, dump_config, parse_config
from .metrics import GridSpec
from .samplers import DivergenceError

OUTPUT_ROOT_ENV = "PARTICLE_EBM_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

# perceptually uniform and monotone in lightness, so brighter means higher density
COLORMAP = "viridis"
MIN_IMAGE_SIDE = 256


@dataclass
class RunArtifacts:
    """Files written by one run as ``(role, path)`` pairs."""

    run_dir: Path
    manifest: list = field(default_factory=list)
    error: str | None = None

    def add(self, role: str, path: Path) -> Path:
        self.manifest.append((role, Path(path)))
        return Path(path)

    def paths(self, role: str) -> list[Path]:
        return [p for r, p in self.manifest if r == role]


def output_root(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir)


def _fresh_dir(base: Path) -> Path:
    base.parent.mkdir(parents=True, exist_ok=True)
    candidate, version = base, 1
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            version += 1
            candidate = base.with_name(f"{base.name}-v{version}")


def run_dir_for(cfg: RunConfig, root: Path | None = None) -> Path:
    root = output_root(cfg) if root is None else Path(root)
    return _fresh_dir(root / f"{cfg.method}-{cfg.digest()}-s{cfg.seed}")


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_particles(path, points) -> None:
    with open(path, "w") as fh:
        fh.write("x0,x1\n")
        for a, b in np.asarray(points, dtype=np.float64).tolist():
            fh.write(f"{a!r},{b!r}\n")


def read_particles(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, 2)


def write_checkpoint(path, cfg: RunConfig, theta) -> None:
    """Resolved config (YAML) followed by the parameter vector, one value per line."""
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))
        fh.write("---\n")
        for v in np.asarray(theta, dtype=np.float64).tolist():
            fh.write(f"{v!r}\n")


def read_checkpoint(path) -> tuple[RunConfig, np.ndarray]:
    from .config import parse_config_text

    text = Path(path).read_text()
    head, _, tail = text.partition("---\n")
    theta = np.array([float(v) for v in tail.split()])
    return parse_config_text(head, str(path)), theta


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {c: np.array([float(r[c]) for r in rows]) for c in trainer.METRIC_COLUMNS}


def _write_final(state: trainer.TrainState, art: RunArtifacts) -> None:
    d = art.run_dir
    if state.config.method == "gamma":
        grid = state.gamma_grid
    else:
        grid = trainer.evaluation_grid(state)
    energy = trainer.energy_on_grid(state, grid)
    log_z = metrics.log_partition_from_values(energy, grid)
    density = np.exp(-energy - log_z)
    metrics.write_grid(art.add("energy_grid", d / "energy.grid"), energy, grid)
    metrics.write_grid(art.add("density_grid", d / "density.grid"), density, grid)
    render_heatmap(d / "density.grid", art.add("heatmap", d / "density.png"), particles=state.particles)
    write_particles(art.add("particles", d / "particles_final.csv"), state.particles)
    write_checkpoint(art.add("checkpoint", d / "checkpoint.txt"), state.config, state.theta)


def _write_manifest(art: RunArtifacts) -> None:
    path = art.run_dir / "manifest.json"
    entries = [{"role": r, "path": p.name} for r, p in art.manifest]
    doc = {"files": entries, "complete": art.error is None}
    if art.error is not None:
        doc["error"] = art.error
    path.write_text(json.dumps(doc, indent=2) + "\n")


def run(config: RunConfig, root=None) -> RunArtifacts:
    """Train one configuration and write every artifact.

    On divergence the partial artifacts (metrics so far, last particles) stay
    on disk next to an ``ERROR`` marker and :class:`DivergenceError` is raised.
    """
    cfg = config.resolved()
    art = RunArtifacts(run_dir_for(cfg, root))
    d = art.run_dir
    (d / "config.yaml").write_text(dump_config(cfg))
    art.add("resolved_config", d / "config.yaml")

    state = trainer.init_state(cfg)
    mpath = art.add("metrics", d / "metrics.csv")
    with open(mpath, "w") as fh:
        fh.write(",".join(trainer.METRIC_COLUMNS) + "\n")

        def on_log(st, row):
            fh.write(",".join(_fmt(row[c]) for c in trainer.METRIC_COLUMNS) + "\n")
            fh.flush()
            if cfg.dump_particles:
                write_particles(art.add("particles", d / f"particles_{st.iteration:06d}.csv"), st.particles)

        try:
            trainer.train(state, on_log=on_log)
        except DivergenceError as exc:
            art.error = str(exc)
            (d / "ERROR").write_text(f"diverged at iteration {state.iteration}: {exc}\n")
            art.add("error_marker", d / "ERROR")
            write_particles(art.add("particles", d / "particles_last.csv"), state.particles)
            _write_manifest(art)
            raise
    _write_final(state, art)
    _write_manifest(art)
    art.add("manifest", d / "manifest.json")
    return art


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSummary:
    runs: dict = field(default_factory=dict)  # seed -> run directory
    failures: dict = field(default_factory=dict)  # seed -> error message
    aggregate: Path | None = None


def _run_one(cfg: RunConfig, root):
    try:
        return str(run(cfg, root).run_dir), None
    except (DivergenceError, OSError, ValueError) as exc:
        return None, f"{type(exc).__name__}: {exc}"


def aggregate_metrics(paths) -> dict[str, np.ndarray]:
    """Per-iteration mean of every metric column over the given CSVs.

    Only iterations present in every file are kept (runs stop at the same
    schedule unless one diverged).
    """
    tables = [read_metrics(p) for p in paths]
    if not tables:
        raise ValueError("nothing to aggregate")
    common = sorted(set.intersection(*(set(t["iteration"].tolist()) for t in tables)))
    out = {"iteration": np.array(common, dtype=np.int64)}
    for c in trainer.METRIC_COLUMNS[1:]:
        cols = []
        for t in tables:
            pos = {it: i for i, it in enumerate(t["iteration"].tolist())}
            cols.append(t[c][[pos[it] for it in common]])
        out[c] = np.mean(cols, axis=0)
    return out


def run_sweep(config: RunConfig, seeds, root=None, workers: int | None = None) -> SweepSummary:
    """One run per seed plus ``aggregate.csv`` of per-iteration means."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("a sweep needs at least one seed")
    cfg = config.resolved()
    root = output_root(cfg) if root is None else Path(root)
    configs = [replace(cfg, seed=s) for s in seeds]
    workers = min(len(seeds), os.cpu_count() or 1) if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one, configs, [root] * len(configs)))
    else:
        results = [_run_one(c, root) for c in configs]

    summary = SweepSummary()
    for s, (path, err) in zip(seeds, results):
        if err is None:
            summary.runs.setdefault(s, path)
        else:
            summary.failures[s] = err
    ok = [Path(p) / "metrics.csv" for p, err in results if err is None]
    sweep_dir = _fresh_dir(root / f"{cfg.method}-{cfg.digest()}-sweep")
    if ok:
        agg = aggregate_metrics(ok)
        summary.aggregate = sweep_dir / "aggregate.csv"
        with open(summary.aggregate, "w") as fh:
            fh.write(",".join(trainer.METRIC_COLUMNS) + "\n")
            for i in range(len(agg["iteration"])):
                fh.write(",".join(_fmt(agg[c][i]) for c in trainer.METRIC_COLUMNS) + "\n")
    doc = {
        "seeds": seeds,
        "runs": {str(s): p for s, (p, e) in zip(seeds, results) if e is None},
        "failures": {str(s): e for s, e in summary.failures.items()},
    }
    (sweep_dir / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")
    return summary


# ---------------------------------------------------------------------------
# rendering


def _to_rgb(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    scaled = np.zeros_like(values) if hi == lo else (values - lo) / (hi - lo)
    lut = (colormaps[COLORMAP](np.linspace(0, 1, 256))[:, :3] * 255).round().astype(np.uint8)
    return lut[np.clip((scaled * 255).round().astype(int), 0, 255)]


def render_heatmap(grid_path, out_path, particles=None) -> Path:
    """Write a PNG of a grid file with the viridis colormap.

    The image is upscaled by an integer factor so each grid cell is a solid
    block, with y increasing upward. ``particles`` (optional ``(n, 2)``) are
    drawn as white pixels. Output bytes depend only on the inputs.
    """
    values, grid = metrics.read_grid(grid_path)
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{grid_path}: grid contains non-finite values")
    rgb = _to_rgb(values)[::-1]
    scale = max(1, math.ceil(MIN_IMAGE_SIDE / max(grid.nx, grid.ny)))
    rgb = np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
    if particles is not None:
        pts = np.asarray(particles, dtype=np.float64).reshape(-1, 2)
        h, w = rgb.shape[:2]
        col = np.floor((pts[:, 0] - grid.xmin) / (grid.xmax - grid.xmin) * w).astype(int)
        row = h - 1 - np.floor((pts[:, 1] - grid.ymin) / (grid.ymax - grid.ymin) * h).astype(int)
        keep = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        rgb[row[keep], col[keep]] = 255
    out_path = Path(out_path)
    Image.fromarray(np.ascontiguousarray(rgb), mode="RGB").save(out_path, format="PNG")
    return out_path


# ---------------------------------------------------------------------------
# command line


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="particle-ebm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("config")
    s = sub.add_parser("sweep", help="run one configuration over several seeds")
    s.add_argument("config")
    s.add_argument("--seeds", required=True, help="comma-separated integers, e.g. 0,1,2")
    s.add_argument("--workers", type=int, default=None)
    h = sub.add_parser("render", help="render a grid file to PNG")
    h.add_argument("grid")
    h.add_argument("out")
    h.add_argument("--particles", default=None, help="particle CSV to overlay")
    v = sub.add_parser("validate", help="parse a config and print it fully resolved")
    v.add_argument("config")
    return p


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds: at least one seed is required")
    return seeds


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    tune_allocator()
    try:
        if args.verb == "validate":
            sys.stdout.write(dump_config(parse_config(args.config)))
        elif args.verb == "run":
            art = run(parse_config(args.config))
            print(art.run_dir)
        elif args.verb == "sweep":
            summary = run_sweep(parse_config(args.config), _parse_seeds(args.seeds), workers=args.workers)
            for s, path in summary.runs.items():
                print(f"seed {s}: {path}")
            for s, err in summary.failures.items():
                print(f"seed {s}: FAILED {err}", file=sys.stderr)
            if summary.aggregate is not None:
                print(f"aggregate: {summary.aggregate}")
            if summary.failures:
                return EXIT_DIVERGED
        else:
            particles = read_particles(args.particles) if args.particles else None
            render_heatmap(args.grid, args.out, particles=particles)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed grid or particle files
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
