"""Run configuration: ``[section]`` headers and ``key = value`` lines.

Sections are ``network``, ``training``, ``paths`` and ``preprocess``.
Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .network import NetworkConfig, _parse_value
from .training import TrainConfig

CONFIG_ENV = "GRANET_CONFIG"


@dataclass(frozen=True)
class Paths:
    train: Optional[str] = None
    validation: Optional[str] = None
    val_fraction: float = 0.1
    test: Optional[str] = None
    out_dir: str = "run"


@dataclass(frozen=True)
class Preprocess:
    hag: bool = False
    hag_cell_size: float = 25.0
    block: float = 100.0
    sub: float = 25.0
    stride: float = 12.5
    class_names: tuple = ()

    def __post_init__(self):
        if self.hag_cell_size <= 0:
            raise ConfigError("hag_cell_size must be positive")
        if not (0 < self.stride <= self.sub <= self.block):
            raise ConfigError("tiling needs 0 < stride <= sub <= block")


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)
    preprocess: Preprocess = field(default_factory=Preprocess)
    source: Optional[str] = None

    def __post_init__(self):
        if not 0 <= self.paths.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        names = self.preprocess.class_names
        if names and len(names) != self.network.class_count:
            raise ConfigError(f"{len(names)} class names for class_count {self.network.class_count}")

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["network"] = self.network.to_section()
        for name, obj in (("training", self.training), ("paths", self.paths), ("preprocess", self.preprocess)):
            cp[name] = _section_of(obj)
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _section_of(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if v is None or v == ():
            continue
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        out[f.name] = str(v)
    return out


def _build(cls, section, base_dir: Optional[Path], path_keys=()):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in dict(section).items():
        if key not in known:
            raise ConfigError(f"unknown {section.name} option {key!r}")
        default = known[key].default
        if key == "class_weights":
            kwargs[key] = tuple(float(x) for x in raw.replace(",", " ").split())
        elif key == "class_names":
            kwargs[key] = tuple(x.strip() for x in raw.split(",") if x.strip())
        elif key in path_keys:
            value = raw.strip()
            if value and base_dir is not None and not os.path.isabs(value):
                value = str(base_dir / value)
            kwargs[key] = value or None
        elif isinstance(default, float):
            try:
                kwargs[key] = float(raw)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        else:
            kwargs[key] = _parse_value(key, raw, default)
    return cls(**kwargs)


def parse_run_config(text: str, base_dir: Optional[Path] = None, source: Optional[str] = None) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    extra = set(cp.sections()) - {"network", "training", "paths", "preprocess"}
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    network = NetworkConfig.from_section(cp["network"]) if "network" in cp else NetworkConfig()
    training = _build(TrainConfig, cp["training"], None) if "training" in cp else TrainConfig()
    paths = (
        _build(Paths, cp["paths"], base_dir, path_keys=("train", "validation", "test", "out_dir"))
        if "paths" in cp
        else Paths()
    )
    pre = _build(Preprocess, cp["preprocess"], None) if "preprocess" in cp else Preprocess()
    return RunConfig(network, training, paths, pre, source)


def resolve_config_path(flag: Optional[str], environ=None) -> Optional[str]:
    """An explicit ``--config`` wins; otherwise the environment variable, if set."""
    environ = os.environ if environ is None else environ
    if flag:
        return flag
    return environ.get(CONFIG_ENV) or None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    return parse_run_config(text, path.resolve().parent, str(path))
