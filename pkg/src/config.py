"""
Flat `key = value` run configuration.

The file holds the union of the training, generator and solver keys plus a few run-level keys.
Values are coerced to the type of the matching dataclass field; `none` clears optional fields.
"""

import dataclasses
import logging
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from src.mil_model import SolverConfig
from src.synth import SynthConfig
from src.trainer import TrainConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration line is malformed, names an unknown key or has a bad value."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class RunSettings:
    """
    run-level keys.

    Attributes:
        data_dir (str): dataset directory holding manifest.tsv.
        out_dir (str): output directory.
        n_folds (int): number of cross-validation folds.
        fold (int, optional): evaluate or train a single fold; all folds when None.
    """
    data_dir: str = "data"
    out_dir: str = "out"
    n_folds: int = 5
    fold: Optional[int] = None


SECTIONS = (RunSettings, TrainConfig, SynthConfig)
# solver keys shared with TrainConfig are not repeated
SOLVER_ONLY = ("log_domain",)


def _field_types() -> dict:
    types = {}
    for section in SECTIONS:
        hints = typing.get_type_hints(section)
        for f in fields(section):
            types.setdefault(f.name, hints[f.name])
    hints = typing.get_type_hints(SolverConfig)
    for name in SOLVER_ONLY:
        types[name] = hints[name]
    return types


FIELD_TYPES = _field_types()


def coerce(key: str, raw: str):
    """Convert the text of a value to the declared type of `key`."""
    target = FIELD_TYPES[key]
    optional = typing.get_origin(target) is typing.Union and type(None) in typing.get_args(target)
    if optional:
        if raw.lower() == "none":
            return None
        target = next(arg for arg in typing.get_args(target) if arg is not type(None))
    if target is bool:
        lowered = raw.lower()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    if target is int:
        return int(raw)
    if target is float:
        return float(raw)
    return raw


@dataclass(frozen=True)
class RunConfig:
    """
    parsed configuration: every key that was set, with its coerced value.
    """
    values: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        """
        Parse configuration text.

        Raises:
            ConfigError: malformed line, unknown or repeated key, or uncoercible value.
        """
        values = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            content = line.split("#", 1)[0].strip()
            if not content:
                continue
            if "=" not in content:
                raise ConfigError(f"expected 'key = value', got {content!r}", line_no)
            key, raw = (part.strip() for part in content.split("=", 1))
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown key {key!r}", line_no)
            if key in values:
                raise ConfigError(f"key {key!r} set twice", line_no)
            if not raw:
                raise ConfigError(f"missing value for {key!r}", line_no)
            try:
                values[key] = coerce(key, raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}", line_no) from exc
        return cls(values=values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            raise ConfigError(f"config file {path} does not exist")
        config = cls.parse(text)
        logger.debug(f"loaded {len(config.values)} keys from {path}")
        return config

    def merged(self, overrides: dict) -> "RunConfig":
        """Copy with `overrides` (e.g. command-line flags) taking precedence; None values are ignored."""
        values = dict(self.values)
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in FIELD_TYPES:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = value
        return RunConfig(values=values)

    def _build(self, section):
        names = {f.name for f in fields(section)}
        try:
            return section(**{k: v for k, v in self.values.items() if k in names})
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def run_settings(self) -> RunSettings:
        return self._build(RunSettings)

    def train_config(self) -> TrainConfig:
        return self._build(TrainConfig)

    def synth_config(self) -> SynthConfig:
        return self._build(SynthConfig)

    def solver_config(self) -> SolverConfig:
        """Transport layer settings used during training and inference."""
        return dataclasses.replace(self.train_config().solver_config(), log_domain=self.values.get("log_domain"))

    def standalone_solver(self) -> SolverConfig:
        """Settings of a single solve: library defaults unless the file or flags set a key."""
        keys = [f.name for f in fields(SolverConfig)]
        try:
            return SolverConfig(**{k: self.values[k] for k in keys if k in self.values})
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
