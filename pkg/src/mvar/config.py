"""Run configuration: one JSON document with model/train/data/sample sections."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import InvalidConfig
from .model import ModelConfig
from .sampler import SamplerConfig
from .trainer import DataConfig, TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "sample": SamplerConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    sample: SamplerConfig = field(default_factory=SamplerConfig)

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise InvalidConfig("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise InvalidConfig(f"unknown config section(s): {', '.join(sorted(unknown))}")
        built = {}
        for name, kind in SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise InvalidConfig(f"section {name!r} must be an object")
            defaults = _defaults(kind)
            for key, value in section.items():
                if key not in defaults:
                    raise InvalidConfig(f"unknown config key {name}.{key}")
                _check_type(f"{name}.{key}", value, defaults[key])
            try:
                built[name] = kind(**section)
            except (TypeError, ValueError) as e:
                raise InvalidConfig(f"section {name!r}: {e}") from None
        return cls(**built)


def _defaults(kind) -> dict:
    return {f.name: getattr(kind(), f.name) for f in fields(kind)}


def _check_type(key: str, value, default):
    ok = True
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    if not ok:
        raise InvalidConfig(f"{key} expects {type(default).__name__}, got {value!r}")


def schema() -> list[tuple[str, str, object]]:
    """(dotted key, type name, default) for every configurable value."""
    rows = []
    for name, kind in SECTIONS.items():
        for key, default in _defaults(kind).items():
            rows.append((f"{name}.{key}", type(default).__name__, default))
    return rows


def schema_text() -> str:
    rows = schema()
    width = max(len(k) for k, _, _ in rows)
    lines = ["configuration keys (set with --set key=value):"]
    lines += [f"  {k:<{width}}  {t:<5}  default {json.dumps(d)}" for k, t, d in rows]
    return "\n".join(lines)


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise InvalidConfig(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(doc: dict, overrides) -> dict:
    """Copy of ``doc`` with dotted ``key=value`` overrides applied and type-checked."""
    out = json.loads(json.dumps(doc))
    for text in overrides:
        key, value = parse_override(text)
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise InvalidConfig(f"unknown config key {key}")
        defaults = _defaults(SECTIONS[section])
        if name not in defaults:
            raise InvalidConfig(f"unknown config key {key}")
        if isinstance(defaults[name], float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        _check_type(key, value, defaults[name])
        out.setdefault(section, {})[name] = value
    return out


def load_document(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise OSError(f"cannot read config {path}: {e.strerror or e}") from e
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}: not valid JSON ({e})") from None


def load_config(path=None, overrides=()) -> RunConfig:
    doc = load_document(path) if path else {}
    return RunConfig.from_dict(apply_overrides(doc, overrides))
