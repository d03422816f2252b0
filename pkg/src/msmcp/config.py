"""Study configuration files.

Configs are flat TOML documents whose keys mirror ``StudyConfig`` fields.  The
two misspecification switches live under ``misspec.``; ``out_dir`` is a CLI
setting and is returned separately.  Unknown keys are rejected.
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .study import StudyConfig

_RENAMED = {"misspec.outcome_drop_z": "outcome_drop_z", "misspec.propensity_wrong": "propensity_wrong"}
_FIELDS = {f.name for f in fields(StudyConfig)}
ALLOWED_KEYS = tuple(sorted((_FIELDS - set(_RENAMED.values())) | set(_RENAMED) | {"out_dir"}))


class ConfigError(ValueError):
    pass


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, val in doc.items():
        name = f"{prefix}{key}"
        if isinstance(val, dict):
            out.update(_flatten(val, name + "."))
        else:
            out[name] = val
    return out


def parse_config(text: str, overrides: Optional[dict] = None) -> Tuple[StudyConfig, Optional[str]]:
    """Parse config text into a validated ``StudyConfig`` and the ``out_dir`` setting.

    ``overrides`` uses the same flat key names and wins over the file.
    """
    try:
        flat = _flatten(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(flat) - set(ALLOWED_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}; allowed keys are {list(ALLOWED_KEYS)}")
    out_dir = flat.pop("out_dir", None)
    kwargs = {_RENAMED.get(k, k): v for k, v in flat.items()}
    bad = [k for k, v in kwargs.items() if isinstance(v, bool) != isinstance(getattr(StudyConfig, k, None), bool)]
    if bad:
        raise ConfigError(f"config keys {bad} have the wrong type")
    try:
        return StudyConfig(**kwargs), out_dir
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, overrides: Optional[dict] = None) -> Tuple[StudyConfig, Optional[str]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, overrides)


def resolved(config: StudyConfig) -> dict:
    """Every field with defaults filled in, as JSON-ready values."""
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(config).items()}


def config_hash(config: StudyConfig) -> str:
    """Digest of the resolved config; ``threads`` is excluded since results do not depend on it."""
    content = {k: v for k, v in resolved(config).items() if k != "threads"}
    blob = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
