"""Flat ``key = value`` run configuration shared by every subcommand."""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .data import GpsConfig, GpsMappingConfig, PlanarConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .training import TrainConfig

_SECTIONS = {
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "planar": PlanarConfig,
    "gps": GpsConfig,
    "mapping": GpsMappingConfig,
}

# keys that are not fields of one of the section dataclasses
_EXTRA = {
    "dataset": "planar",      # planar | gps | navigation
    "data_dir": "data",
    "out_dir": "run",
    "test_fraction": 0.2,
    "paths_file": "",         # navigation paths, used when dataset = navigation
    "nodes_file": "",         # graph for dataset = navigation
    "edges_file": "",
    "click_features": 1,
}

PATH_KEYS = ("data_dir", "out_dir", "paths_file", "nodes_file", "edges_file")


def _defaults():
    out = dict(_EXTRA)
    for cls in _SECTIONS.values():
        for f in dataclasses.fields(cls):
            if f.name == "encoder":
                continue
            if f.default is not dataclasses.MISSING:
                out.setdefault(f.name, f.default)
            elif f.default_factory is not dataclasses.MISSING:
                out.setdefault(f.name, f.default_factory())
    return out


DEFAULTS = _defaults()


def _coerce(key, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(x) for x in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _render(v):
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    """Resolved configuration; unknown keys are rejected."""

    def __init__(self, values=None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def from_file(cls, path):
        cfg = cls()
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        for line_no, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{path}:{line_no}: {exc}") from None
        return cfg

    def section(self, name):
        cls = _SECTIONS[name]
        kwargs = {f.name: self.values[f.name] for f in dataclasses.fields(cls) if f.name in self.values}
        if name == "train":
            kwargs["encoder"] = self.section("encoder")
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from None

    def model_dict(self):
        """Settings that define a run's results; file locations are left out."""
        return {k: v for k, v in self.as_dict().items() if k not in PATH_KEYS}

    def as_dict(self):
        return dict(sorted(self.values.items()))

    def dump(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in self.as_dict().items():
                fh.write(f"{k} = {_render(v)}\n")
