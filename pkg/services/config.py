"""
config.py
Configuration utilities for pullgrid: environment-driven service settings and
the key=value agent configuration file.
"""

import os
import re
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Optional, Tuple

from dotenv import load_dotenv

from components.exceptions import ConfigError

# Load environment variables once at startup
load_dotenv()

logger = logging.getLogger("config")

DEFAULT_LISTEN = "127.0.0.1:8400"
DEFAULT_STORE = "./pullgrid-db"
DEFAULT_MAX_RESCHEDULES = 3
DEFAULT_RPC_TIMEOUT = 30.0

SERVICE_PATHS = {
    "production": "/production",
    "monitoring": "/monitoring",
    "bookkeeping": "/bookkeeping",
    "software": "/software",
}

_HOST_PORT = re.compile(r"^[A-Za-z0-9_.\-]+:\d{1,5}$")
_URL = re.compile(r"^https?://[A-Za-z0-9_.\-]+(:\d{1,5})?(/\S*)?$")
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def validate_listen(value: str) -> Tuple[bool, str]:
    if not value:
        return False, "listen address is empty"
    if not _HOST_PORT.match(value.strip()):
        return False, "listen address should look like host:port"
    port = int(value.rsplit(":", 1)[1])
    if not 0 < port < 65536:
        return False, "port out of range"
    return True, "Valid format"


def validate_url(value: str) -> Tuple[bool, str]:
    if not value:
        return False, "endpoint is empty"
    if not _URL.match(value.strip()):
        return False, "endpoint should be an http(s) URL"
    return True, "Valid format"


def validate_positive_int(value: str) -> Tuple[bool, str]:
    try:
        number = int(value)
    except (TypeError, ValueError):
        return False, "not an integer"
    if number < 1:
        return False, "must be at least 1"
    return True, "Valid format"


def validate_fraction(value: str) -> Tuple[bool, str]:
    try:
        number = float(value)
    except (TypeError, ValueError):
        return False, "not a number"
    if not 0.0 <= number <= 1.0:
        return False, "must be within [0, 1]"
    return True, "Valid format"


def validate_positive_float(value: str) -> Tuple[bool, str]:
    try:
        number = float(value)
    except (TypeError, ValueError):
        return False, "not a number"
    if number <= 0:
        return False, "must be positive"
    return True, "Valid format"


def validate_bool(value: str) -> Tuple[bool, str]:
    if str(value).strip().lower() in _TRUE | _FALSE:
        return True, "Valid format"
    return False, "expected a boolean (true/false)"


def parse_bool(value: str) -> bool:
    return str(value).strip().lower() in _TRUE


def load_setting(
    env_var: str,
    default: Any,
    validator: Callable[[str], Tuple[bool, str]],
    parser: Callable[[str], Any] = str,
) -> Any:
    """
    Load a setting from the environment, falling back to ``default`` when the
    variable is unset or invalid.
    """
    raw = os.getenv(env_var)
    if raw is None or raw == "":
        return default
    valid, msg = validator(raw)
    if valid:
        logger.info(f"{env_var} loaded from environment: {msg}")
        return parser(raw.strip())
    logger.warning(f"{env_var} invalid in environment: {msg}; using default {default!r}")
    return default


@dataclass
class ServiceConfig:
    listen_address: str = DEFAULT_LISTEN
    max_reschedules: int = DEFAULT_MAX_RESCHEDULES
    store_path: Optional[str] = DEFAULT_STORE
    auto_approve: bool = False
    fsync: bool = True
    site_exclusion_reasons: FrozenSet[str] = frozenset({"submission_failure", "site_failure"})

    def __post_init__(self):
        if self.max_reschedules < 1:
            raise ConfigError("max_reschedules must be at least 1")
        valid, msg = validate_listen(self.listen_address)
        if not valid:
            raise ConfigError(f"listen_address: {msg}")


def load_service_config() -> ServiceConfig:
    """Build the central-service configuration from PULLGRID_* variables."""
    config = ServiceConfig(
        listen_address=load_setting("PULLGRID_LISTEN", DEFAULT_LISTEN, validate_listen),
        max_reschedules=load_setting("PULLGRID_MAX_RESCHEDULES", DEFAULT_MAX_RESCHEDULES, validate_positive_int, int),
        store_path=load_setting("PULLGRID_STORE", DEFAULT_STORE, lambda v: (bool(v.strip()), "path")),
        auto_approve=load_setting("PULLGRID_AUTO_APPROVE", False, validate_bool, parse_bool),
        fsync=load_setting("PULLGRID_FSYNC", True, validate_bool, parse_bool),
    )
    logger.info(f"Service configuration loaded (listen={config.listen_address}, store={config.store_path})")
    return config


def load_endpoints(overrides: Optional[Dict[str, Optional[str]]] = None) -> Dict[str, str]:
    """Resolve service endpoint URLs: explicit overrides, then PULLGRID_*_URL, then the default listen address."""
    overrides = overrides or {}
    base = f"http://{load_setting('PULLGRID_LISTEN', DEFAULT_LISTEN, validate_listen)}"
    endpoints = {}
    for name, path in SERVICE_PATHS.items():
        explicit = overrides.get(name)
        if explicit:
            valid, msg = validate_url(explicit)
            if not valid:
                raise ConfigError(f"{name} endpoint: {msg}")
            endpoints[name] = explicit
            continue
        endpoints[name] = load_setting(f"PULLGRID_{name.upper()}_URL", base + path, validate_url)
    return endpoints


def load_rpc_timeout() -> float:
    return load_setting("PULLGRID_RPC_TIMEOUT", DEFAULT_RPC_TIMEOUT, validate_positive_float, float)


# --------------------------------------------------------------------------- #
# Agent configuration file
# --------------------------------------------------------------------------- #
@dataclass
class AgentConfig:
    site_id: str
    services: Dict[str, str] = field(default_factory=dict)
    fill_target: int = 4
    occupancy_threshold: float = 0.8
    poll_interval: float = 60.0
    outbox_path: str = "outbox"
    install_area: str = "software"
    storage_element: str = "CERN-CASTOR"
    log_storage_element: str = "CERN-LOGS"
    max_transfer_attempts_per_cycle: int = 10
    work_dir: str = "."
    lock_path: Optional[str] = None
    relay: bool = False
    reschedule_causes: FrozenSet[str] = frozenset({"submission_failure", "software_unavailable"})
    disk_quota_mb: int = 100_000
    shared_area_writable: bool = True
    cpu_power: float = 1.0
    slot_count: int = 4
    registration_sends: int = 1

    def __post_init__(self):
        if not self.site_id:
            raise ConfigError("site_id must be set")
        if self.fill_target < 1:
            raise ConfigError("fill_target must be at least 1")
        if not 0.0 <= self.occupancy_threshold <= 1.0:
            raise ConfigError("occupancy_threshold must be within [0, 1]")
        if self.poll_interval <= 0:
            raise ConfigError("poll_interval must be positive")
        if self.max_transfer_attempts_per_cycle < 1:
            raise ConfigError("max_transfer_attempts_per_cycle must be at least 1")
        if self.slot_count < 1 or self.registration_sends < 1:
            raise ConfigError("slot_count and registration_sends must be at least 1")

    def path(self, value: str) -> Path:
        """Resolve a configured path relative to work_dir."""
        candidate = Path(value)
        return candidate if candidate.is_absolute() else Path(self.work_dir) / candidate


_AGENT_KEYS: Dict[str, Tuple[Callable[[str], Tuple[bool, str]], Callable[[str], Any]]] = {
    "site_id": (lambda v: (bool(v), "site id"), str),
    "fill_target": (validate_positive_int, int),
    "occupancy_threshold": (validate_fraction, float),
    "poll_interval": (validate_positive_float, float),
    "outbox_path": (lambda v: (bool(v), "path"), str),
    "install_area": (lambda v: (bool(v), "path"), str),
    "storage_element": (lambda v: (bool(v), "storage element"), str),
    "log_storage_element": (lambda v: (bool(v), "storage element"), str),
    "max_transfer_attempts_per_cycle": (validate_positive_int, int),
    "work_dir": (lambda v: (bool(v), "path"), str),
    "lock_path": (lambda v: (bool(v), "path"), str),
    "relay": (validate_bool, parse_bool),
    "reschedule_causes": (lambda v: (True, "list"), lambda v: frozenset(x.strip() for x in v.split(",") if x.strip())),
    "disk_quota_mb": (validate_positive_int, int),
    "shared_area_writable": (validate_bool, parse_bool),
    "cpu_power": (validate_positive_float, float),
    "slot_count": (validate_positive_int, int),
    "registration_sends": (validate_positive_int, int),
}


def parse_key_value_text(text: str) -> Dict[str, str]:
    """Parse line-oriented key=value text; '#' starts a comment."""
    values: Dict[str, str] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_agent_config(path: str) -> AgentConfig:
    """Read an agent configuration file; service endpoints fall back to the environment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read agent config {path}: {e}")

    raw = parse_key_value_text(text)
    endpoint_overrides = {}
    kwargs: Dict[str, Any] = {}
    for key, value in raw.items():
        if key.endswith("_url") and key[: -len("_url")] in SERVICE_PATHS:
            endpoint_overrides[key[: -len("_url")]] = value
            continue
        if key not in _AGENT_KEYS:
            raise ConfigError(f"unknown agent config key '{key}'")
        validator, parser = _AGENT_KEYS[key]
        valid, msg = validator(value)
        if not valid:
            raise ConfigError(f"{key}: {msg}")
        kwargs[key] = parser(value)
    if "site_id" not in kwargs:
        raise ConfigError("site_id must be set")
    if "work_dir" not in kwargs:
        kwargs["work_dir"] = str(Path(path).resolve().parent)
    config = AgentConfig(services=load_endpoints(endpoint_overrides), **kwargs)
    logger.info(f"Agent configuration loaded for site {config.site_id}")
    return config
