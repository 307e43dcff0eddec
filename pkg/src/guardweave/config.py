"""Layered runtime configuration.

Settings come from four places; later sources win:
defaults < `guardweave.toml` < command-line flags < environment variables
(`GUARDWEAVE_*`).  The file schema is strict — an unknown key is an error,
not a silent no-op.
"""

from __future__ import annotations

import os
from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

CONFIG_FILENAME = "guardweave.toml"
ENV_PREFIX = "GUARDWEAVE_"

BACKENDS = ("scripted", "replay", "remote")


class ConfigError(ValueError):
    """A setting is malformed, out of range, or not a known key."""


@dataclass(frozen=True)
class Config:
    """Resolved settings for the CLI and service."""

    store_path: Path = Path("guardweave-store")
    backend: str = "scripted"
    model_api_base: str = ""
    port: int = 8466
    auto_resume: bool = True
    parallelism: int = 4

    def to_json(self) -> dict:
        return {
            "store_path": str(self.store_path),
            "backend": self.backend,
            "model_api_base": self.model_api_base,
            "port": self.port,
            "auto_resume": self.auto_resume,
            "parallelism": self.parallelism,
        }


def _as_str(value) -> str:
    if isinstance(value, str):
        return value
    raise ConfigError(f"expected a string, got {value!r}")


def _as_path(value) -> Path:
    return Path(_as_str(value) if not isinstance(value, Path) else value)


def _as_backend(value) -> str:
    name = _as_str(value)
    if name not in BACKENDS:
        raise ConfigError(f"backend must be one of {', '.join(BACKENDS)}; got {name!r}")
    return name


def _as_int(value) -> int:
    if isinstance(value, bool):
        raise ConfigError(f"expected an integer, got {value!r}")
    if isinstance(value, int):
        return value
    try:
        return int(str(value).strip())
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {value!r}") from exc


def _as_port(value) -> int:
    port = _as_int(value)
    if not 1 <= port <= 65535:
        raise ConfigError(f"port must be in 1..65535, got {port}")
    return port


def _as_parallelism(value) -> int:
    parallelism = _as_int(value)
    if parallelism < 1:
        raise ConfigError(f"parallelism must be >= 1, got {parallelism}")
    return parallelism


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    word = str(value).strip().lower()
    if word in _TRUE:
        return True
    if word in _FALSE:
        return False
    raise ConfigError(f"expected true/false, got {value!r}")


_COERCERS = {
    "store_path": _as_path,
    "backend": _as_backend,
    "model_api_base": _as_str,
    "port": _as_port,
    "auto_resume": _as_bool,
    "parallelism": _as_parallelism,
}


def _read_file(path: Path) -> dict:
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = sorted(set(raw) - set(_COERCERS))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {', '.join(unknown)}")
    return raw


def _env_overrides(env: Mapping[str, str]) -> dict:
    found = {}
    for key in _COERCERS:
        value = env.get(ENV_PREFIX + key.upper())
        if value is not None:
            found[key] = value
    return found


def resolve(
    file_path: str | Path | None = None,
    *,
    cli: Mapping[str, object] | None = None,
    env: Mapping[str, str] | None = None,
) -> Config:
    """Merge settings from all sources into a validated Config.

    `file_path` names an explicit config file (an error if absent); without
    it, `guardweave.toml` in the working directory is used when present.
    `cli` holds flag values (None entries are ignored); `env` defaults to
    the process environment."""
    layers: list[Mapping[str, object]] = []
    if file_path is not None:
        path = Path(file_path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        layers.append(_read_file(path))
    elif Path(CONFIG_FILENAME).exists():
        layers.append(_read_file(Path(CONFIG_FILENAME)))
    if cli:
        layers.append({k: v for k, v in cli.items() if k in _COERCERS and v is not None})
    layers.append(_env_overrides(os.environ if env is None else env))

    merged: dict[str, object] = {}
    for layer in layers:
        merged.update(layer)
    values = {}
    for key, value in merged.items():
        try:
            values[key] = _COERCERS[key](value)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return Config(**values)
