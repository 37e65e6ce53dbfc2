"""Experiment configuration files.

A config is an INI-style file with ``[train]``, ``[data]`` and ``[output]``
sections of ``key = value`` lines.  Lists are comma separated.  Every key is
checked against the known fields; anything unknown or malformed raises a
:class:`~tcts.trainer.ConfigError` naming ``section.key``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .tasks import HORIZON, LATENCY
from .trainer import ConfigError, TrainConfig

DATA_SOURCES = ("synthetic", "files", "csv")
TUPLE_ITEM = {"tasks": int, "seeds": int, "feature_mask": str, "k": int, "task_sets": int, "strategies": str}


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    seed: int = 0
    # transduction
    vocab: int = 16
    dependency: int = 2
    train_size: int = 5000
    valid_size: int = 500
    test_size: int = 500
    persistence: float = 0.75
    corpus_dir: str = ""
    # series
    instruments: int = 20
    days: int = 1500
    horizon_signal: int = 1
    noise: float = 0.02
    coef: float = 0.01
    csv: str = ""
    train_frac: float = 0.70
    valid_frac: float = 0.15

    def validate(self, family: str) -> None:
        if self.source not in DATA_SOURCES:
            raise ConfigError("data.source", f"must be one of {', '.join(DATA_SOURCES)}; got {self.source!r}")
        if family == LATENCY:
            if self.source == "csv":
                raise ConfigError("data.source", "csv input is for the horizon family")
            if self.source == "files" and not self.corpus_dir:
                raise ConfigError("data.corpus_dir", "required when source = files")
            if self.vocab < 4:
                raise ConfigError("data.vocab", f"must be >= 4, got {self.vocab}")
            if self.dependency < 0:
                raise ConfigError("data.dependency", f"must be >= 0, got {self.dependency}")
            for name in ("train_size", "valid_size", "test_size"):
                if getattr(self, name) < 1:
                    raise ConfigError(f"data.{name}", f"must be >= 1, got {getattr(self, name)}")
            if not 0 <= self.persistence <= 1:
                raise ConfigError("data.persistence", f"must be in [0, 1], got {self.persistence}")
        else:
            if self.source == "files":
                raise ConfigError("data.source", "files input is for the latency family")
            if self.source == "csv" and not self.csv:
                raise ConfigError("data.csv", "required when source = csv")
            if self.instruments < 2:
                raise ConfigError("data.instruments", f"must be >= 2, got {self.instruments}")
            if self.horizon_signal < 1:
                raise ConfigError("data.horizon_signal", f"must be >= 1, got {self.horizon_signal}")
            if self.noise < 0:
                raise ConfigError("data.noise", f"must be >= 0, got {self.noise}")
        if not (0 < self.train_frac and 0 < self.valid_frac and self.train_frac + self.valid_frac < 1):
            raise ConfigError("data.train_frac", "split fractions must be positive and sum to less than 1")


@dataclass(frozen=True)
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def validate(self) -> None:
        self.data.validate(self.train.family)
        if self.train.family == HORIZON and self.data.source == "synthetic":
            need = self.train.window + max(self.train.tasks)
            if self.data.days <= need:
                raise ConfigError("data.days", f"must exceed window + largest horizon = {need}")
        if not self.out_dir:
            raise ConfigError("output.dir", "must not be empty")

    def with_overrides(self, **train_fields) -> ExperimentConfig:
        return replace(self, train=replace(self.train, **train_fields))


def _convert(section: str, key: str, raw: str, default):
    where = f"{section}.{key}"
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError
            return v
        if isinstance(default, tuple):
            item = TUPLE_ITEM[key]
            return tuple(item(p.strip()) for p in raw.split(",") if p.strip())
        return raw
    except ValueError:
        kind = "list" if isinstance(default, tuple) else type(default).__name__
        raise ConfigError(where, f"cannot parse {raw!r} as {kind}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}


def _read_section(parser, section: str, cls) -> dict:
    defaults = _defaults(cls)
    values = {}
    if not parser.has_section(section):
        return values
    for key, raw in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"{section}.{key}", "unknown key")
        values[key] = _convert(section, key, raw, defaults[key])
    return values


def _parser() -> configparser.ConfigParser:
    p = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                  inline_comment_prefixes=("#",))
    p.optionxform = str
    return p


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; raises :class:`ConfigError` on the first bad field."""
    parser = _parser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("file", str(exc).splitlines()[0]) from None
    extra = set(parser.sections()) - {"train", "data", "output", "sweep"}
    if extra:
        raise ConfigError(sorted(extra)[0], "unknown section")
    train_values = _read_section(parser, "train", TrainConfig)
    data_values = _read_section(parser, "data", DataConfig)
    out_dir = "runs/default"
    if parser.has_section("output"):
        for key, raw in parser.items("output"):
            if key != "dir":
                raise ConfigError(f"output.{key}", "unknown key")
            out_dir = raw.strip()
    try:
        train = TrainConfig(**train_values)
    except ConfigError as exc:
        raise ConfigError(f"train.{exc.field}", str(exc).split(": ", 1)[1]) from None
    cfg = ExperimentConfig(train, DataConfig(**data_values), out_dir)
    cfg.validate()
    return cfg


def _read_text(path: Path) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise ConfigError("file", f"cannot read {path}: {exc.strerror}") from None


def _resolve_paths(cfg: ExperimentConfig, base: Path) -> ExperimentConfig:
    """Resolve relative data paths against the directory of the config file."""
    data = cfg.data
    for key in ("corpus_dir", "csv"):
        value = getattr(data, key)
        if value and not Path(value).is_absolute():
            data = replace(data, **{key: str((base / value).resolve())})
    return replace(cfg, data=data)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return _resolve_paths(parse_config(_read_text(path)), path.parent)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = ["[train]"]
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {_format(getattr(cfg.train, f.name))}")
    lines += ["", "[data]"]
    for f in fields(DataConfig):
        lines.append(f"{f.name} = {_format(getattr(cfg.data, f.name))}")
    lines += ["", "[output]", f"dir = {cfg.out_dir}", ""]
    return "\n".join(lines)


@dataclass(frozen=True)
class SweepSpec:
    """Axes of a sweep: main-task values (latency) or task-set sizes (horizon), strategies and seeds."""

    k: tuple[int, ...] = (1, 3, 5, 7, 9)
    task_sets: tuple[int, ...] = (3, 5, 10)
    strategies: tuple[str, ...] = ("waitk", "mtl", "cl", "ours")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def validate(self, family: str) -> None:
        from .trainer import STRATEGIES
        axis = "k" if family == LATENCY else "task_sets"
        for name in (axis, "strategies", "seeds"):
            if not getattr(self, name):
                raise ConfigError(f"sweep.{name}", "must not be empty")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError("sweep.strategies", f"unknown strategy {s!r}")
        if min(getattr(self, axis)) < 1:
            raise ConfigError(f"sweep.{axis}", "values must be >= 1")


def parse_sweep(text: str) -> tuple[ExperimentConfig, SweepSpec]:
    """A sweep file is an experiment config plus a ``[sweep]`` section."""
    cfg = parse_config(text)
    parser = _parser()
    parser.read_string(text)
    spec = SweepSpec(**_read_section(parser, "sweep", SweepSpec))
    spec.validate(cfg.train.family)
    return cfg, spec


def load_sweep(path) -> tuple[ExperimentConfig, SweepSpec]:
    path = Path(path)
    cfg, spec = parse_sweep(_read_text(path))
    return _resolve_paths(cfg, path.parent), spec
