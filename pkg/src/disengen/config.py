"""Run configuration: namespaced module tunables resolved from defaults, a
config file (JSON or ``key=value`` lines) and command-line overrides.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .diffusion import DiffusionConfig
from .dit import DiTConfig
from .errors import ConfigError
from .hffm import HffmConfig
from .synthdata import SynthConfig
from .textdis import TextdisConfig
from .visdis import VisdisConfig

STAGES = ("visual", "text", "diffusion")
SEED_ENV = "DISENGEN_SEED"


@dataclass
class DataConfig:
    n: int = 2000
    channels: int = 3
    size: int = 32
    n_classes: int = 3
    radius_range: tuple[float, float] = (0.15, 0.32)
    center_range: tuple[float, float] = (0.38, 0.62)
    frequency_range: tuple[float, float] = (2.0, 8.0)
    caption_len: int = 32
    class_bias: float = 0.6

    def synth(self) -> SynthConfig:
        return SynthConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(SynthConfig)})


@dataclass
class MetricsConfig:
    extractors: str = "rp,hf"
    output_dim: int = 64
    kid_subsets: int = 10
    sample_steps: int = 20


@dataclass
class PathsConfig:
    data: str = ""
    visual_ckpt: str = ""
    text_ckpt: str = ""
    diffusion_ckpt: str = ""
    base_ckpt: str = ""
    out: str = ""


SECTIONS = {
    "data": DataConfig,
    "visdis": VisdisConfig,
    "textdis": TextdisConfig,
    "hffm": HffmConfig,
    "dit": DiTConfig,
    "diffusion": DiffusionConfig,
    "metrics": MetricsConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    visdis: VisdisConfig = field(default_factory=VisdisConfig)
    textdis: TextdisConfig = field(default_factory=TextdisConfig)
    hffm: HffmConfig = field(default_factory=HffmConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0
    stage: str = "visual"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def flat(self) -> dict[str, Any]:
        out = {"seed": self.seed, "stage": self.stage}
        for name in SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out


def _coerce(key: str, raw: Any, default: Any, annotation: Any) -> Any:
    """Convert ``raw`` (string from a flag/file, or a JSON value) to the
    field's type, judged by its default value."""
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            if isinstance(raw, float) and not raw.is_integer():
                raise ValueError(raw)
            if isinstance(raw, bool):
                raise ValueError(raw)
            return int(raw) if not isinstance(raw, str) else int(raw.strip())
        if isinstance(default, float):
            if isinstance(raw, bool):
                raise ValueError(raw)
            return float(raw)
        if isinstance(default, tuple):
            if isinstance(raw, str):
                s = raw.strip().strip("()[]")
                raw = [p for p in s.split(",") if p.strip()]
            vals = tuple(type(d)(v) for d, v in zip(default, raw))
            if len(vals) != len(default) or len(list(raw)) != len(default):
                raise ValueError(raw)
            return vals
        if isinstance(default, str):
            if not isinstance(raw, str):
                raise ValueError(raw)
            return raw
    except (TypeError, ValueError):
        pass
    else:
        return raw
    raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(default).__name__})")


def _fields(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints.get(f.name) for f in dataclasses.fields(cls)}


def apply_overrides(cfg: RunConfig, values: dict[str, Any]) -> RunConfig:
    """Return a copy of ``cfg`` with dotted-key ``values`` applied."""
    sections = {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
    top = {"seed": cfg.seed, "stage": cfg.stage}
    for key, raw in values.items():
        if key in top:
            top[key] = _coerce(key, raw, top[key], None)
            continue
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        fields = _fields(SECTIONS[section])
        if name not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        sections[section][name] = _coerce(key, raw, sections[section][name], fields[name])
    if top["stage"] not in STAGES:
        raise ConfigError(f"stage must be one of {STAGES}, got {top['stage']!r}")
    try:
        built = {name: SECTIONS[name](**vals) for name, vals in sections.items()}
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(**built, **top)


def _flatten(obj: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def read_config_file(path: str | Path | None) -> dict[str, Any]:
    """JSON (nested or dotted keys) or ``key = value`` lines with ``#`` comments."""
    if not path:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if not text.strip():
        return {}
    if text.lstrip().startswith("{"):
        try:
            return _flatten(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_flags(flags: Iterable[str]) -> dict[str, str]:
    out = {}
    for flag in flags:
        if "=" not in flag:
            raise ConfigError(f"override must be key=value, got {flag!r}")
        k, v = flag.split("=", 1)
        out[k.strip()] = v
    return out


def parse_config(file: str | Path | None = None, flags: Iterable[str] | dict = (),
                 env: dict | None = None) -> RunConfig:
    """Resolve defaults, then the file, then flags. ``DISENGEN_SEED`` fills in
    the seed when neither file nor flags set it."""
    env = os.environ if env is None else env
    values = read_config_file(file)
    flag_values = dict(flags) if isinstance(flags, dict) else parse_flags(flags)
    if "seed" not in values and "seed" not in flag_values and env.get(SEED_ENV):
        values["seed"] = env[SEED_ENV]
    values.update(flag_values)
    return apply_overrides(RunConfig(), values)


def config_from_dict(d: dict) -> RunConfig:
    """Rebuild a config from :meth:`RunConfig.to_dict` output."""
    return apply_overrides(RunConfig(), _flatten(d))
