"""Settings from defaults, a dotenv-style file, VOXFUSE_* environment variables
and explicit overrides, in increasing precedence.

Keys are SECTION_FIELD in upper case (``FUSION_BATCH_SIZE=4096``); top-level
fields have no section (``THREADS=4``).
"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ValidationError

from voxfuse.errors import ConfigError
from voxfuse.models import Settings

logger = logging.getLogger(__name__)

ENV_PREFIX = "VOXFUSE_"
# environment keys read by the service, not by Settings
SERVICE_KEYS = {"GRID", "EMBEDDINGS", "RELOAD"}
NONE_VALUES = {"", "none", "null"}


def _key_map() -> Dict[str, tuple]:
    keys = {}
    for name, info in Settings.model_fields.items():
        sub = info.annotation
        if isinstance(sub, type) and issubclass(sub, BaseModel):
            for field_name in sub.model_fields:
                keys[f"{name}_{field_name}".upper()] = (name, field_name)
        else:
            keys[name.upper()] = (name,)
    return keys


KEYS = _key_map()


def _apply(tree: Dict[str, Any], values: Mapping[str, Optional[str]], source: str) -> None:
    for raw_key, value in values.items():
        key = raw_key.upper()
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown configuration key '{raw_key}'")
        if value is None or value.strip().lower() in NONE_VALUES:
            value = None
        else:
            value = value.strip()
        path = KEYS[key]
        if len(path) == 1:
            tree[path[0]] = value
        else:
            tree.setdefault(path[0], {})[path[1]] = value


def load_settings(config_path: Optional[Union[str, Path]] = None,
                  environ: Optional[Mapping[str, str]] = None,
                  overrides: Optional[Mapping[str, Any]] = None) -> Settings:
    """Merge configuration layers into a validated Settings.

    `overrides` uses the same SECTION_FIELD keys and wins over everything.
    """
    tree: Dict[str, Any] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        _apply(tree, dotenv_values(path), str(path))
        logger.debug(f"Loaded config file {path}")
    environ = os.environ if environ is None else environ
    env_values = {k[len(ENV_PREFIX):]: v for k, v in environ.items()
                  if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX):] not in SERVICE_KEYS}
    _apply(tree, env_values, "environment")
    if overrides:
        _apply(tree, {k: None if v is None else str(v) for k, v in overrides.items()}, "command line")
    try:
        return Settings.model_validate(_prune(tree))
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def _prune(tree: Dict[str, Any]) -> Dict[str, Any]:
    """Drop explicit None for fields whose default is not None."""
    out = {}
    for name, value in tree.items():
        if isinstance(value, dict):
            section = Settings.model_fields[name].annotation
            out[name] = {k: v for k, v in value.items()
                         if v is not None or section.model_fields[k].default is None}
        elif value is not None:
            out[name] = value
    return out


def dump_settings(settings: Settings) -> str:
    """Render settings in the config-file syntax."""
    lines = []
    for name, value in settings.model_dump().items():
        if isinstance(value, dict):
            for field_name, v in value.items():
                lines.append(f"{name.upper()}_{field_name.upper()}={'' if v is None else v}")
        else:
            lines.append(f"{name.upper()}={value}")
    return "\n".join(lines) + "\n"
