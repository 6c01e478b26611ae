"""Plain key=value config files for the controller and agent daemons.

Lines look like ``api_port = 8080``; ``#`` starts a comment.  Flags always
override file values, and the file is located via ``EAAS_CONFIG`` (controller)
or ``EAAS_AGENT_CONFIG`` (agent) when not given explicitly.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_kv_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"bad config line {lineno}: {raw!r}")
        values[key.strip()] = value.strip()
    return values


def get_int(values: dict[str, str], key: str, default: int) -> int:
    if key not in values:
        return default
    try:
        return int(values[key])
    except ValueError:
        raise ConfigError(f"config key {key} must be an integer") from None


def get_float(values: dict[str, str], key: str, default: float) -> float:
    if key not in values:
        return default
    try:
        return float(values[key])
    except ValueError:
        raise ConfigError(f"config key {key} must be a number") from None


def get_bool(values: dict[str, str], key: str, default: bool) -> bool:
    if key not in values:
        return default
    text = values[key].lower()
    if text in ("true", "yes", "1", "on"):
        return True
    if text in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"config key {key} must be a boolean")
