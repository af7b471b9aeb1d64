"""Run configuration: file loading, dotted overrides, canonical hashing.

A run config merges the environment, trainer, distillation and network
sections. Files may be JSON or TOML with section names mirroring the
dataclass fields; command-line overrides use dotted ``section.key=value``
pairs. Every run serializes its resolved config next to its outputs.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .distill import DistillConfig
from .env import EnvConfig
from .mappo import TrainConfig
from .policy import PolicyArch

SEED_ENV_VAR = "FORMATION_LAB_SEED"


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    arch: PolicyArch = field(default_factory=PolicyArch)

    def to_dict(self) -> dict:
        out = {}
        for section in fields(self):
            value = dataclasses.asdict(getattr(self, section.name))
            out[section.name] = {
                k: list(v) if isinstance(v, tuple) else v for k, v in value.items()
            }
        return out

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


_SECTIONS = {
    "env": EnvConfig,
    "train": TrainConfig,
    "distill": DistillConfig,
    "arch": PolicyArch,
}


def _coerce(raw, target_type):
    if isinstance(raw, str):
        if target_type is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"cannot parse boolean from {raw!r}")
        if target_type in (int, float):
            return target_type(raw)
        if target_type is tuple:
            parts = raw.strip("[]() ").split(",")
            return tuple(float(p) for p in parts)
        return raw
    if target_type is tuple and isinstance(raw, (list, tuple)):
        return tuple(raw)
    if target_type is float and isinstance(raw, int):
        return float(raw)
    return raw


def _build_section(cls, values: dict):
    known = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown {cls.__name__} field {key!r}")
        target = {f.name: f for f in fields(cls)}[key]
        target_type = target.type if isinstance(target.type, type) else type(
            getattr(cls(), key)
        )
        kwargs[key] = _coerce(raw, target_type)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _build_section(cls, data.get(name, {}))
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return RunConfig(**sections)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    else:
        with open(path) as fh:
            data = json.load(fh)
    return config_from_dict(data)


def apply_overrides(config: RunConfig, pairs) -> RunConfig:
    """Apply dotted ``section.key=value`` strings on top of a config."""
    data = config.to_dict()
    for pair in pairs or ():
        if "=" not in pair:
            raise ValueError(f"override {pair!r} is not of the form section.key=value")
        dotted, value = pair.split("=", 1)
        if "." not in dotted:
            raise ValueError(f"override key {dotted!r} must be section.key")
        section, key = dotted.split(".", 1)
        if section not in data:
            raise ValueError(f"unknown config section {section!r}")
        data[section][key] = value
    return config_from_dict(data)


def default_seed() -> int:
    return int(os.environ.get(SEED_ENV_VAR, "0"))


def save_config(config: RunConfig, path, extra: dict | None = None):
    data = config.to_dict()
    if extra:
        data["run"] = extra
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
