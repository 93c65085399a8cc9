"""Experiment configuration: JSON schema, defaults and validation.

Keys beginning with ``_`` are treated as comments and ignored, which lets
config files carry unit documentation next to the values.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .cost import DomainBox, DomainGrid, KernelConfig, build_uniform_grid
from .dynamics import MsdModel
from .optimizer import OptimOptions
from .signals import DirectSamples, MultisinePhases, amplitude_for_target_std


class ConfigError(ValueError):
    """Invalid configuration; ``path`` addresses the offending field (``kernel.epsilon``)."""

    def __init__(self, path: str, message: str, code: str = "E_CONFIG_INVALID"):
        self.path = path
        self.code = code
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ModelConfig:
    type: str = "msd"
    m: float = 5.0  # kg
    s: float = 800.0  # N/m
    a: float = 0.25  # m
    l: float = 0.17  # m
    c: float = 10.0  # N s/m
    Ts: float = 0.01  # s


@dataclass(frozen=True)
class InputConfig:
    type: str = "multisine"  # or "direct"
    N: int = 2048  # samples per period
    fs: float = 100.0  # Hz
    line_min: int = 21
    line_max: int = 204
    target_std: float = 160.0  # input units (N)
    seed: int = 0
    bounds: tuple[float, float] | None = None  # direct parametrization only


@dataclass(frozen=True)
class DomainConfig:
    lower: tuple[float, ...] = (-400.0, -2.0, -20.0)
    upper: tuple[float, ...] = (400.0, 2.0, 20.0)
    spacing: tuple[float, ...] | None = (42.1053, 0.2105, 2.1053)
    points_per_dim: tuple[int, ...] | None = None


@dataclass(frozen=True)
class KernelSettings:
    variances: tuple[float, ...] = (1600.0, 0.04, 4.0)
    epsilon: float = 1e-3
    cutoff: float | None = None


@dataclass(frozen=True)
class SteadyStateConfig:
    tol: float = 1e-9
    max_periods: int = 50
    x0: tuple[float, ...] | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    step_tolerance: float = 1e-9
    memory: int = 10
    sufficient_decrease: float = 1e-4
    backtracking: float = 0.5
    max_backtracks: int = 40


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    input: InputConfig = field(default_factory=InputConfig)
    domain: DomainConfig = field(default_factory=DomainConfig)
    kernel: KernelSettings = field(default_factory=KernelSettings)
    steady_state: SteadyStateConfig = field(default_factory=SteadyStateConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output_dir: str = "out"

    def to_dict(self) -> dict:
        return _to_plain(dataclasses.asdict(self))

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    # -- runtime objects --------------------------------------------------

    def build_model(self) -> MsdModel:
        m = self.model
        return MsdModel(m=m.m, s=m.s, a=m.a, l=m.l, c=m.c, Ts=m.Ts)

    def build_parametrization(self):
        inp = self.input
        if inp.type == "multisine":
            F = inp.line_max - inp.line_min + 1
            amp = amplitude_for_target_std(inp.target_std, F)
            return MultisinePhases(inp.N, inp.fs, inp.line_min, inp.line_max, np.full(F, amp))
        return DirectSamples(inp.N, inp.bounds)

    def build_grid(self) -> DomainGrid:
        box = DomainBox(self.domain.lower, self.domain.upper)
        if self.domain.points_per_dim is not None:
            ppd = self.domain.points_per_dim
        else:
            ppd = box.points_for_spacing(self.domain.spacing)
        return build_uniform_grid(box, ppd)

    def build_kernel(self) -> KernelConfig:
        k = self.kernel
        return KernelConfig(np.array(k.variances), k.epsilon, k.cutoff)

    def build_options(self) -> OptimOptions:
        o = self.optimizer
        lower = upper = None
        if self.input.type == "direct" and self.input.bounds is not None:
            lower, upper = self.input.bounds
        return OptimOptions(**dataclasses.asdict(o), lower=lower, upper=upper)

    @property
    def n_z(self) -> int:
        return 1 + 2  # single-input, two-state benchmark model


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_SECTIONS = {
    "model": ModelConfig,
    "input": InputConfig,
    "domain": DomainConfig,
    "kernel": KernelSettings,
    "steady_state": SteadyStateConfig,
    "optimizer": OptimizerConfig,
}

_INT_FIELDS = {"N", "line_min", "line_max", "seed", "max_periods", "max_iterations", "memory", "max_backtracks"}
_INT_TUPLES = {"points_per_dim"}
_FLOAT_TUPLES = {"lower", "upper", "spacing", "variances", "x0", "bounds"}
_STR_FIELDS = {"type"}
_OPTIONAL = {"bounds", "spacing", "points_per_dim", "cutoff", "x0"}


def _number(path, value, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    if not math.isfinite(value):
        raise ConfigError(path, "must be finite")
    return float(value)


def _parse_field(path: str, name: str, value: Any):
    if value is None:
        if name in _OPTIONAL:
            return None
        raise ConfigError(path, "must not be null")
    if name in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if name in _INT_TUPLES or name in _FLOAT_TUPLES:
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list of numbers")
        return tuple(_number(f"{path}[{i}]", v, name in _INT_TUPLES) for i, v in enumerate(value))
    return _number(path, value, name in _INT_FIELDS)


def _parse_section(name: str, cls, raw) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(name, "expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key.startswith("_"):
            continue
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown field")
        kwargs[key] = _parse_field(f"{name}.{key}", key, value)
    return cls(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("", "config root must be a JSON object")
    sections = {}
    for key, value in raw.items():
        if key.startswith("_"):
            continue
        if key in _SECTIONS:
            sections[key] = _parse_section(key, _SECTIONS[key], value)
        elif key == "output_dir":
            if not isinstance(value, str):
                raise ConfigError("output_dir", "expected a string")
            sections[key] = value
        else:
            raise ConfigError(key, "unknown section")
    cfg = ExperimentConfig(**sections)
    check_config(cfg)
    return cfg


def check_config(cfg: ExperimentConfig) -> None:
    """Cross-field invariants; raises :class:`ConfigError` naming the field."""
    m = cfg.model
    if m.type != "msd":
        raise ConfigError("model.type", f"unsupported model {m.type!r} (only 'msd')")
    for name in ("m", "s", "a", "Ts"):
        if not getattr(m, name) > 0:
            raise ConfigError(f"model.{name}", "must be > 0")
    if m.c < 0:
        raise ConfigError("model.c", "must be >= 0")

    inp = cfg.input
    if inp.type not in ("multisine", "direct"):
        raise ConfigError("input.type", "must be 'multisine' or 'direct'")
    if inp.N < 1:
        raise ConfigError("input.N", "must be >= 1")
    if not inp.fs > 0:
        raise ConfigError("input.fs", "must be > 0")
    if abs(inp.fs * m.Ts - 1.0) > 1e-9:
        raise ConfigError("input.fs", f"must equal 1/model.Ts ({1.0 / m.Ts:g} Hz)")
    if not (1 <= inp.line_min <= inp.line_max and 2 * inp.line_max < inp.N):
        raise ConfigError("input.line_max", "need 1 <= line_min <= line_max < N/2")
    if inp.target_std < 0:
        raise ConfigError("input.target_std", "must be >= 0")
    if inp.seed < 0:
        raise ConfigError("input.seed", "must be >= 0")
    if inp.bounds is not None:
        if len(inp.bounds) != 2 or inp.bounds[0] > inp.bounds[1]:
            raise ConfigError("input.bounds", "expected [lo, hi] with lo <= hi")
        if inp.type != "direct":
            raise ConfigError("input.bounds", "only valid for the direct parametrization")

    n_z = cfg.n_z
    d = cfg.domain
    if len(d.lower) != n_z:
        raise ConfigError("domain.lower", f"expected {n_z} entries (n_z), got {len(d.lower)}")
    if len(d.upper) != n_z:
        raise ConfigError("domain.upper", f"expected {n_z} entries (n_z), got {len(d.upper)}")
    for j, (lo, hi) in enumerate(zip(d.lower, d.upper)):
        if not lo < hi:
            raise ConfigError(f"domain.upper[{j}]", "must exceed domain.lower")
    if (d.spacing is None) == (d.points_per_dim is None):
        raise ConfigError("domain.spacing", "give exactly one of spacing or points_per_dim")
    if d.points_per_dim is not None:
        if len(d.points_per_dim) != n_z or any(p < 2 for p in d.points_per_dim):
            raise ConfigError("domain.points_per_dim", f"need {n_z} entries, each >= 2")
    else:
        if len(d.spacing) != n_z:
            raise ConfigError("domain.spacing", f"expected {n_z} entries (n_z), got {len(d.spacing)}")
        try:
            DomainBox(d.lower, d.upper).points_for_spacing(d.spacing)
        except ValueError as exc:
            raise ConfigError("domain.spacing", str(exc)) from None

    k = cfg.kernel
    if len(k.variances) != n_z:
        raise ConfigError(
            "kernel.variances", f"expected {n_z} entries (n_z = n_u + n_x), got {len(k.variances)}"
        )
    if any(v <= 0 for v in k.variances):
        raise ConfigError("kernel.variances", "must all be > 0")
    if not k.epsilon > 0:
        raise ConfigError("kernel.epsilon", "must be > 0")
    if k.cutoff is not None and not k.cutoff > 0:
        raise ConfigError("kernel.cutoff", "must be > 0")

    ss = cfg.steady_state
    if not ss.tol > 0:
        raise ConfigError("steady_state.tol", "must be > 0")
    if ss.max_periods < 1:
        raise ConfigError("steady_state.max_periods", "must be >= 1")
    if ss.x0 is not None and len(ss.x0) != 2:
        raise ConfigError("steady_state.x0", "expected 2 entries (n_x)")

    try:
        cfg.build_options()
    except ValueError as exc:
        raise ConfigError("optimizer", str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("", f"config file not found: {path}", code="E_CONFIG_NOT_FOUND")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})", code="E_CONFIG_PARSE") from None
    return config_from_dict(raw)


validate_config = load_config


def benchmark_config_path() -> Path:
    return Path(str(resources.files("spacefill") / "configs" / "benchmark.json"))


def benchmark_config() -> ExperimentConfig:
    return load_config(benchmark_config_path())
