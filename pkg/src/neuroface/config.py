"""Loading helpers for the YAML documents that describe models and runs."""

from __future__ import annotations

import hashlib
from importlib import resources
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """A model or run document is malformed or inconsistent."""


class DataError(ValueError):
    """An input data file (dataset, AU stream) is malformed."""


def data_path(name: str) -> Path:
    """Path of a bundled data file (``neuroface/data/<name>``)."""
    return Path(str(resources.files("neuroface") / "data" / name))


def load_yaml(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"missing document: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


def dump_yaml(doc: dict[str, Any], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False, default_flow_style=None, width=100)


def require(doc: dict[str, Any], key: str, where: str = "") -> Any:
    if key not in doc:
        raise ConfigError(f"{where or 'document'}: missing key '{key}'")
    return doc[key]


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


FACE_FILES = ("face.obj", "face.yaml", "face_muscles.yaml", "au_oracle.yaml", "expressions.yaml")


def files_digest(paths: list[str | Path], extra: str = "") -> str:
    """Combined digest of several files (order matters) plus a free-form tag."""
    h = hashlib.sha256()
    for p in paths:
        h.update(file_digest(p).encode())
    h.update(extra.encode())
    return h.hexdigest()
