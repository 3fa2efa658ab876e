"""Run configuration: nested dataclasses with strict JSON/YAML (de)serialisation."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .curation import FilterConfig
from .netmodel import ModelConfig
from .objective import LossConfig
from .scenegen import ModalityCorruptionSpec
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    size: int = 64
    n_categories: int = 16
    hard_categories: tuple[int, ...] = (3, 10)
    hard_similarity: tuple[float, float] = (0.85, 0.95)
    p_amb: float = 0.0
    k_max: int = 2
    count: int = 1000
    corruption: ModalityCorruptionSpec = field(default_factory=ModalityCorruptionSpec)

    def __post_init__(self):
        if self.size <= 0 or self.size % 8:
            raise ConfigError("generator.size must be a positive multiple of 8")
        if self.n_categories < 1 or self.count < 0:
            raise ConfigError("generator.n_categories >= 1 and count >= 0 required")
        if any(not 0 <= h < self.n_categories for h in self.hard_categories):
            raise ConfigError("hard category ids must lie in [0, n_categories)")


@dataclass
class LoopConfig:
    rounds: int = 3
    per_category: int = 100
    heldout_per_category: int = 20
    seed_set_size: int = 500
    alpha: float = 8.0
    beta: float = 0.5
    w_min: float | None = None     # default 1/|C|
    w_new: float | None = None     # default 4/|C|
    clamp: bool = True
    labels: str = "labeler"        # or "gt" (upper-bound diagnostic)
    from_scratch: bool = False
    student_epochs: int = 8
    labeler_epochs: int = 20
    filter_epochs: int = 20
    filter_enabled: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("loop.rounds must be >= 1")
        if self.labels not in ("labeler", "gt"):
            raise ConfigError("loop.labels must be 'labeler' or 'gt'")
        if min(self.per_category, self.heldout_per_category, self.seed_set_size) < 1:
            raise ConfigError("loop budgets must be positive")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    curation: FilterConfig = field(default_factory=FilterConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    seed: int = 0
    out: str = "runs/default"
    scale: float = 1.0
    precision: str = "float32"

    def __post_init__(self):
        if not 0 < self.scale:
            raise ConfigError("scale must be positive")
        if self.precision not in ("float32", "float64"):
            raise ConfigError("precision must be float32 or float64")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    def scaled(self, n: int) -> int:
        return max(1, int(round(n * self.scale)))

    def to_dict(self) -> dict:
        return to_plain(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return from_plain(cls, d)


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_plain(tp, value, where)
    if origin is typing.Union or origin is getattr(__import__("types"), "UnionType", None):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_plain(cls, d, where: str = ""):
    """Build dataclass ``cls`` from a mapping; unknown keys are an error."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where or cls.__name__}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {unknown}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}" if where else k) for k, v in d.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return RunConfig.from_dict(data or {})


def save_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    else:
        path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
