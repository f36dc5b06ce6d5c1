"""Experiment configuration as a sectioned key/value file.

Every dataclass field becomes a key; values are parsed back to the type of
the field's default, so a written config reloads to an equal object.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from pathlib import Path

from .biencoder import EncoderConfig, Stage1Config
from .distill import Stage2Config
from .metrics import DEFAULT_KS
from .synthetic import SyntheticSpec


class ConfigFileError(ValueError):
    """Unknown section or key, or a value that does not parse."""


@dataclass
class PathsConfig:
    data: str = "data"
    out: str = "runs"


@dataclass
class RunConfig:
    seed: int = 7


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = DEFAULT_KS
    split: str = "test"


@dataclass
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    run: RunConfig = field(default_factory=RunConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def sections(self) -> list[str]:
        return [f.name for f in dataclasses.fields(self)]

    # -- text form -----------------------------------------------------------

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in self.sections:
            section = getattr(self, name)
            parser[name] = {f.name: _format(getattr(section, f.name))
                            for f in dataclasses.fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigFileError(str(exc)) from exc
        cfg = cls()
        for name in parser.sections():
            if name not in cfg.sections:
                raise ConfigFileError(f"unknown section [{name}]; expected one of {cfg.sections}")
            for key, raw in parser[name].items():
                cfg.set(name, key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigFileError(f"config file {path} not found")
        return cls.loads(path.read_text(encoding="utf-8"))

    def set(self, section: str, key: str, raw: str) -> None:
        """Assign ``raw`` (text) to ``section.key``, parsed to the field's type."""
        if section not in self.sections:
            raise ConfigFileError(f"unknown section [{section}]")
        obj = getattr(self, section)
        names = {f.name for f in dataclasses.fields(obj)}
        if key not in names:
            raise ConfigFileError(f"unknown key {key!r} in [{section}]; expected one of "
                                  f"{sorted(names)}")
        current = getattr(obj, key)
        try:
            value = _parse(raw, current)
            updated = dataclasses.replace(obj, **{key: value})
        except ValueError as exc:
            raise ConfigFileError(f"[{section}] {key}: cannot use {raw!r} ({exc})") from exc
        setattr(self, section, updated)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, like):
    raw = raw.strip()
    if isinstance(like, bool):
        lowered = raw.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ValueError("expected a boolean")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        parts = [p for p in raw.split(",") if p.strip()]
        kind = type(like[0]) if like else int
        return tuple(kind(p.strip()) for p in parts)
    return raw
