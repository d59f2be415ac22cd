"""Shared structured-text (YAML) config loading for models, scenarios and runs.

All bundled configs carry a ``schema_version`` field; loaders reject unknown
versions so stale files fail loudly instead of half-parsing.
"""

from __future__ import annotations

import importlib.resources
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Raised when a config file fails validation; carries the field path."""

    def __init__(self, path: str, message: str):
        self.field_path = path
        super().__init__(f"{path}: {message}")


def load_yaml(source: str | Path) -> dict:
    """Load a YAML mapping from a file path."""
    p = Path(source)
    if not p.exists():
        raise ConfigError(str(source), "config file not found")
    with open(p, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ConfigError(str(source), "top level must be a mapping")
    return data


def dump_yaml(data: dict, path: str | Path) -> None:
    """Write a config mapping as YAML (stable key order for reproducibility)."""
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, sort_keys=True)


def bundled_text(name: str) -> str:
    """Read a bundled data file shipped inside the package."""
    return (
        importlib.resources.files("hafo_lab").joinpath("data").joinpath(name).read_text("utf-8")
    )


def load_bundled(name: str) -> dict:
    data = yaml.safe_load(bundled_text(name))
    if not isinstance(data, dict):
        raise ConfigError(name, "bundled config is not a mapping")
    return data


def check_schema_version(data: dict, where: str) -> None:
    v = data.get("schema_version")
    if v != SCHEMA_VERSION:
        raise ConfigError(f"{where}.schema_version", f"expected {SCHEMA_VERSION}, got {v!r}")


def require(data: dict, key: str, where: str) -> Any:
    if key not in data:
        raise ConfigError(f"{where}.{key}", "missing required key")
    return data[key]
