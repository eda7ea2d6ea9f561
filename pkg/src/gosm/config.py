"""INI configuration with one section per module.

Precedence is command-line flag, then config file, then built-in default.
``default_config_text()`` renders every default, and is what
``configs/default.ini`` in the repository contains.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import PipelineConfig
from .planner import PlannerConfig
from .query import QueryConfig


@dataclass
class ProviderConfig:
    fixtures: str = ""
    url: str = ""
    embedding_table: str = ""
    embedding_url: str = ""
    timeout: float = 10.0
    retries: int = 2


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    scene: str = "synthetic"
    method: str = "gosm"


@dataclass
class Settings:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    query: QueryConfig = field(default_factory=QueryConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def sections(self) -> dict:
        """Section name -> config object, in file order."""
        p = self.pipeline
        return {"pipeline": p, "tracker": p.tracker, "mapper": p.mapper, "semantics": p.semantics,
                "query": self.query, "planner": self.planner, "provider": self.provider, "eval": self.eval}


_NESTED = {"tracker", "mapper", "semantics"}


def _convert(kind, text: str):
    if kind is bool or kind == "bool":
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    return text


def _scalar_fields(obj):
    return [f for f in dataclasses.fields(obj) if f.name not in _NESTED]


def apply_overrides(settings: Settings, section: str, values: dict[str, str]) -> Settings:
    """Return ``settings`` with string ``values`` applied to ``section``."""
    sections = settings.sections()
    if section not in sections:
        raise ValueError(f"unknown config section [{section}]")
    obj = sections[section]
    known = {f.name: f for f in _scalar_fields(obj)}
    changes = {}
    for key, text in values.items():
        if key not in known:
            raise ValueError(f"unknown option {key!r} in [{section}]")
        kind = type(getattr(obj, key))
        changes[key] = _convert(kind, text)
    new = dataclasses.replace(obj, **changes)
    if section in _NESTED:
        return dataclasses.replace(settings, pipeline=dataclasses.replace(settings.pipeline, **{section: new}))
    return dataclasses.replace(settings, **{section: new})


def load_settings(path=None, overrides: dict[str, dict[str, str]] | None = None) -> Settings:
    settings = Settings()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        text = Path(path).read_text()
        parser.read_string(text, source=str(path))
        for section in parser.sections():
            settings = apply_overrides(settings, section, dict(parser[section]))
    for section, values in (overrides or {}).items():
        settings = apply_overrides(settings, section, values)
    return settings


def render_settings(settings: Settings) -> str:
    lines = []
    for name, obj in settings.sections().items():
        lines.append(f"[{name}]")
        for f in _scalar_fields(obj):
            value = getattr(obj, f.name)
            lines.append(f"{f.name} = {str(value).lower() if isinstance(value, bool) else value}")
        lines.append("")
    return "\n".join(lines)


def default_config_text() -> str:
    return "# Built-in defaults. Command-line flags override values given here.\n\n" + render_settings(Settings())
