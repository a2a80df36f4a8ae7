"""Experiment configuration: one YAML document per experiment.

Sections mirror the simulator's own config dataclasses, so anything a run
accepts can be set from the file. Unknown keys are errors. Values given on the
command line (``section.key=value``) override the file, which overrides the
defaults.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .engine import EngineConfig, Policy
from .fixtures import HEAVY_TAILED, CorpusShape, chat_trace, synthetic_scripts
from .scheduler import SchedulerConfig
from .simcore import ClusterConfig, RunConfig, SimConfig
from .workload import Trace, load_chat_corpus, reshape_turns

SHAPES = {"sharegpt": CorpusShape(), "heavy": HEAVY_TAILED,
          "single_turn": dataclasses.replace(CorpusShape(), single_turn_fraction=1.0)}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadConfig:
    corpus: str | None = None           # line-delimited conversation file; else synthetic
    synthetic: str = "sharegpt"         # sharegpt | heavy | single_turn
    sessions: int = 1000
    users: tuple[int, ...] = (256,)
    miss_fraction: float = 0.0
    high_fraction: float = 0.0
    speed_sigma: float = 0.15
    speed_scale: float = 1.0            # multiplies reading and typing speed
    reshape: tuple[int, int] | None = None   # fixed (prompt, response) tokens per turn

    def __post_init__(self):
        if self.synthetic not in SHAPES:
            raise ConfigError(f"workload.synthetic must be one of {sorted(SHAPES)}")
        if self.sessions < 1:
            raise ConfigError("workload.sessions must be >= 1")
        if not self.users or min(self.users) < 1:
            raise ConfigError("workload.users needs at least one count >= 1")
        for name in ("miss_fraction", "high_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"workload.{name} must lie in [0, 1]")
        if self.speed_scale <= 0 or self.speed_sigma < 0:
            raise ConfigError("workload speeds must be positive")
        if self.reshape is not None and (len(self.reshape) != 2 or min(self.reshape) < 1):
            raise ConfigError("workload.reshape is [prompt_tokens, response_tokens]")


@dataclass(frozen=True)
class ExperimentConfig:
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    policies: tuple[str, ...] = ("recompute", "swap", "symphony")
    seed: int = 0
    output: str | None = None

    def __post_init__(self):
        if not self.policies:
            raise ConfigError("policies must not be empty")
        for p in self.policies:
            try:
                Policy(p)
            except ValueError:
                raise ConfigError(f"unknown policy {p!r}") from None

    def run_config(self) -> RunConfig:
        return RunConfig(self.cluster, self.engine, self.scheduler, self.sim)

    def build_trace(self, users: int) -> Trace:
        return build_trace(self.workload, users, self.seed)


# ---------------------------------------------------------------- building

def _hints(cls) -> dict[str, Any]:
    return typing.get_type_hints(cls)


def _convert(tp: Any, value: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _convert(a, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0] if errors else f"{where}: bad value {value!r}")
    if dataclasses.is_dataclass(tp):
        return build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp in (int, float) and isinstance(value, str):
        value = _number(value, where)  # YAML 1.1 reads 6e9 as a string
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp!r}")


def _number(text: str, where: str) -> int | float:
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: expected a number, got {text!r}") from None


def build(cls, data: Any, where: str = "config"):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, unknown))}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def to_dict(obj) -> dict[str, Any]:
    """Plain-data form of a config; tuples become lists so YAML stays simple."""
    def plain(v):
        if dataclasses.is_dataclass(v):
            return {f.name: plain(getattr(v, f.name)) for f in dataclasses.fields(v) if f.init}
        if isinstance(v, (list, tuple)):
            return [plain(x) for x in v]
        return v
    return plain(obj)


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from None
    return path, value


def merge(base: dict[str, Any], path: list[str], value: Any) -> None:
    node = base
    for p in path[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError(f"override {'.'.join(path)}: {p} is not a section")
        node = nxt
    node[path[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] = ()) -> ExperimentConfig:
    """Defaults, then the file, then ``key=value`` overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            loc = f":{mark.line + 1}" if mark is not None else ""
            raise ConfigError(f"{path}{loc}: invalid YAML") from None
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        data = loaded or {}
    for o in overrides:
        merge(data, *parse_override(o))
    return build(ExperimentConfig, data, str(path) if path else "config")


# ---------------------------------------------------------------- traces

def build_trace(w: WorkloadConfig, users: int, seed: int) -> Trace:
    """Closed-loop trace for one concurrency level."""
    if w.corpus is not None:
        scripts = load_chat_corpus(w.corpus, w.sessions)
        if w.speed_scale != 1.0:
            scripts = [dataclasses.replace(s, user_profile=dataclasses.replace(
                s.user_profile, reading_speed=s.user_profile.reading_speed * w.speed_scale,
                typing_speed=s.user_profile.typing_speed * w.speed_scale)) for s in scripts]
    else:
        shape = SHAPES[w.synthetic]
        shape = dataclasses.replace(shape, reading_speed=shape.reading_speed * w.speed_scale,
                                    typing_speed=shape.typing_speed * w.speed_scale)
        prefix = {"sharegpt": "s", "heavy": "h", "single_turn": "u"}[w.synthetic]
        scripts = synthetic_scripts(w.sessions, seed, shape, prefix=prefix)
    trace = chat_trace(scripts, users, seed, miss_fraction=w.miss_fraction,
                       high_fraction=w.high_fraction, speed_sigma=w.speed_sigma)
    if w.reshape is not None:
        trace = reshape_turns(trace, *w.reshape)
    return trace
