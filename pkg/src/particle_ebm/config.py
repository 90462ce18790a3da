"""Run configuration: schema, defaults, YAML parsing and emission."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Optional, Union

import yaml

METHODS = ("alpha", "beta", "gamma", "pcd", "anneal-rb")


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field/line."""


@dataclass
class ModelConfig:
    kind: str = "mlp"
    hidden: int = 300
    n_layers: int = 2
    dim: int = 2


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class KernelConfig:
    kind: str = "rbf"
    # a positive number, or "median" (median pairwise distance, frozen per run)
    bandwidth: Union[float, str] = "median"
    n_draws: int = 1


@dataclass
class BufferConfig:
    capacity: Optional[int] = None  # defaults to 10 * n_particles
    reinit_prob: float = 0.05
    noise_scale: float = 0.1


@dataclass
class MetricsConfig:
    grid: list = field(default_factory=lambda: [200, 200])
    box: list = field(default_factory=lambda: [-6.0, 6.0, -6.0, 6.0])
    gamma_grid: list = field(default_factory=lambda: [64, 64])
    mode_radius: Optional[float] = None  # defaults to 3 sigma per component
    mode_min_frac: float = 0.01


@dataclass
class RunConfig:
    method: str = "alpha"
    seed: int = 0
    target: Any = "ring8"
    iterations: int = 5000
    n_particles: int = 1000
    batch_size: int = 256
    n_data: int = 10000
    full_batch: bool = False
    particle_lr: Optional[float] = None
    burn_in_steps: int = 100
    correction_steps: Optional[int] = None
    correction_noise_scale: float = 1.0
    langevin_step: float = 0.01
    langevin_steps: int = 20
    log_interval: int = 100
    log_wall_time: bool = False
    dump_particles: bool = True
    output_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    kernel: Optional[KernelConfig] = None
    buffer: Optional[BufferConfig] = None
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def resolved(self) -> "RunConfig":
        """Copy with every method-dependent default made explicit."""
        d = to_dict(self)
        if d["particle_lr"] is None:
            d["particle_lr"] = 0.5 if self.method == "gamma" else 1.0
        if d["correction_steps"] is None:
            d["correction_steps"] = 10 if self.method in ("alpha", "beta") else 0
        if self.method == "anneal-rb":
            buf = d["buffer"] or asdict(BufferConfig())
            if buf["capacity"] is None:
                buf["capacity"] = 10 * self.n_particles
            d["buffer"] = buf
        return from_dict(d)

    def digest(self) -> str:
        d = to_dict(self)
        d.pop("seed")
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:10]


_SECTIONS = {
    "model": ModelConfig,
    "optimizer": OptimizerConfig,
    "kernel": KernelConfig,
    "buffer": BufferConfig,
    "metrics": MetricsConfig,
}


def to_dict(cfg) -> dict:
    return asdict(cfg)


def _coerce(value, annot, where):
    """Check/convert a scalar against a (string) type annotation."""
    a = str(annot)
    if value is None:
        if "Optional" in a or a == "Any":
            return None
        raise ConfigError(f"{where}: value must not be null")
    if a == "Any":
        return value
    if a in ("bool",):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if "int" in a and "float" not in a:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if "float" in a:
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        if isinstance(value, (int, float)):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                if "str" in a:
                    return value
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if a == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if a == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data, prefix, lines):
    if not isinstance(data, dict):
        raise ConfigError(f"{_loc(prefix, lines)}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{_loc(prefix + (key,), lines)}: unknown key {'.'.join(prefix + (key,))!r}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        path = prefix + (name,)
        where = _loc(path, lines)
        if name in _SECTIONS and cls is RunConfig:
            kwargs[name] = None if data[name] is None else _build(_SECTIONS[name], data[name], path, lines)
        else:
            kwargs[name] = _coerce(data[name], f.type, where)
    return cls(**kwargs)


def _loc(path, lines):
    line = lines.get(tuple(path)) if lines else None
    name = ".".join(path) or "<root>"
    return f"{name} (line {line})" if line else name


def _key_lines(node, prefix=()):
    out = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = prefix + (k.value,)
            out[path] = k.start_mark.line + 1
            out.update(_key_lines(v, path))
    return out


def from_dict(data: dict, lines: dict | None = None) -> RunConfig:
    cfg = _build(RunConfig, data, (), lines or {})
    validate(cfg, lines or {})
    return cfg


def validate(cfg: RunConfig, lines: dict | None = None) -> None:
    lines = lines or {}
    if cfg.method not in METHODS:
        raise ConfigError(f"{_loc(('method',), lines)}: unknown method {cfg.method!r}; expected one of {METHODS}")
    if cfg.method == "gamma" and cfg.kernel is None:
        raise ConfigError("method gamma requires a 'kernel' section")
    for name in ("n_particles", "batch_size", "n_data", "langevin_steps", "log_interval"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{_loc((name,), lines)}: must be >= 1")
    for name in ("iterations", "burn_in_steps"):
        if getattr(cfg, name) < 0:
            raise ConfigError(f"{_loc((name,), lines)}: must be >= 0")
    if cfg.correction_steps is not None and cfg.correction_steps < 0:
        raise ConfigError(f"{_loc(('correction_steps',), lines)}: must be >= 0")
    for name in ("langevin_step",):
        if not getattr(cfg, name) > 0:
            raise ConfigError(f"{_loc((name,), lines)}: must be > 0")
    if cfg.particle_lr is not None and not cfg.particle_lr > 0:
        raise ConfigError(f"{_loc(('particle_lr',), lines)}: must be > 0")
    if not cfg.optimizer.lr >= 0:
        raise ConfigError(f"{_loc(('optimizer', 'lr'), lines)}: must be >= 0")
    if cfg.optimizer.kind not in ("sgd", "adam"):
        raise ConfigError(f"{_loc(('optimizer', 'kind'), lines)}: expected sgd or adam")
    if cfg.kernel is not None:
        from .kernels import KERNEL_KINDS

        if cfg.kernel.kind not in KERNEL_KINDS:
            raise ConfigError(f"{_loc(('kernel', 'kind'), lines)}: unknown kernel {cfg.kernel.kind!r}")
        bw = cfg.kernel.bandwidth
        if isinstance(bw, str) and bw != "median" or not isinstance(bw, str) and not bw > 0:
            raise ConfigError(f"{_loc(('kernel', 'bandwidth'), lines)}: expected 'median' or a positive number")
        if cfg.kernel.n_draws < 1:
            raise ConfigError(f"{_loc(('kernel', 'n_draws'), lines)}: must be >= 1")
    if cfg.buffer is not None:
        if not 0 <= cfg.buffer.reinit_prob <= 1:
            raise ConfigError(f"{_loc(('buffer', 'reinit_prob'), lines)}: must lie in [0, 1]")
        if not 0 < cfg.buffer.noise_scale <= 1:
            raise ConfigError(f"{_loc(('buffer', 'noise_scale'), lines)}: must lie in (0, 1]")
    from .targets import from_config

    try:
        from_config(cfg.target)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{_loc(('target',), lines)}: invalid target ({exc})") from None


def parse_config_text(text: str, source: str = "<string>") -> RunConfig:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: cannot parse config: {exc}") from None
    if data is None:
        data = {}
    lines = _key_lines(node) if node is not None else {}
    try:
        return from_dict(data, lines).resolved()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def parse_config(path) -> RunConfig:
    """Read a YAML run config and fill every default."""
    with open(path) as fh:
        return parse_config_text(fh.read(), str(path))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)
