from pathlib import Path

import pytest

from components.exceptions import ConfigError
from services.config import (
    DEFAULT_MAX_RESCHEDULES,
    AgentConfig,
    ServiceConfig,
    load_agent_config,
    load_endpoints,
    load_service_config,
    load_setting,
    parse_key_value_text,
    validate_fraction,
    validate_listen,
    validate_positive_int,
)

AGENT_CONF = """
# site agent
site_id = CERN
fill_target = 8
occupancy_threshold = 0.5
relay = yes
reschedule_causes = submission_failure, site_failure
production_url = http://prod.example.org:8400/production
"""


def test_parse_key_value_text() -> None:
    assert parse_key_value_text("a=1\n# comment\n\nb = two # trailing\nc=x=y") == {"a": "1", "b": "two", "c": "x=y"}
    with pytest.raises(ConfigError) as info:
        parse_key_value_text("a=1\nbroken")
    assert "line 2" in str(info.value)


def test_validators() -> None:
    assert validate_listen("localhost:8400")[0]
    assert not validate_listen("localhost")[0]
    assert not validate_listen("host:70000")[0]
    assert validate_fraction("0.8")[0] and not validate_fraction("1.5")[0]
    assert not validate_positive_int("0")[0] and not validate_positive_int("x")[0]


def test_load_agent_config(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.delenv("PULLGRID_LISTEN", raising=False)
    monkeypatch.setenv("PULLGRID_MONITORING_URL", "http://mon.example.org/monitoring")
    path = tmp_path / "agent.conf"
    path.write_text(AGENT_CONF)
    config = load_agent_config(str(path))
    assert config.site_id == "CERN"
    assert config.fill_target == 8 and config.occupancy_threshold == 0.5
    assert config.relay is True
    assert config.reschedule_causes == frozenset({"submission_failure", "site_failure"})
    assert config.services["production"] == "http://prod.example.org:8400/production"
    assert config.services["monitoring"] == "http://mon.example.org/monitoring"
    assert config.services["software"] == "http://127.0.0.1:8400/software"
    assert config.work_dir == str(tmp_path.resolve())
    assert config.path("outbox") == tmp_path.resolve() / "outbox"


def test_agent_config_errors(tmp_path: Path) -> None:
    path = tmp_path / "agent.conf"
    for text, fragment in (
        ("site_id=A\ncolour=blue", "unknown agent config key 'colour'"),
        ("site_id=A\nfill_target=0", "fill_target"),
        ("fill_target=2", "site_id must be set"),
        ("site_id=A\nproduction_url=ftp://x", "production endpoint"),
    ):
        path.write_text(text)
        with pytest.raises(ConfigError) as info:
            load_agent_config(str(path))
        assert fragment in str(info.value)
    with pytest.raises(ConfigError):
        load_agent_config(str(tmp_path / "missing.conf"))
    with pytest.raises(ConfigError):
        AgentConfig(site_id="A", occupancy_threshold=1.5)


def test_load_setting_falls_back_on_invalid_values(monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("PULLGRID_MAX_RESCHEDULES", "zero")
    assert load_setting("PULLGRID_MAX_RESCHEDULES", 3, validate_positive_int, int) == 3
    monkeypatch.setenv("PULLGRID_MAX_RESCHEDULES", "5")
    assert load_setting("PULLGRID_MAX_RESCHEDULES", 3, validate_positive_int, int) == 5


def test_load_service_config(monkeypatch: pytest.MonkeyPatch, tmp_path: Path) -> None:
    monkeypatch.setenv("PULLGRID_LISTEN", "0.0.0.0:9000")
    monkeypatch.setenv("PULLGRID_STORE", str(tmp_path / "db"))
    monkeypatch.setenv("PULLGRID_AUTO_APPROVE", "true")
    monkeypatch.delenv("PULLGRID_MAX_RESCHEDULES", raising=False)
    config = load_service_config()
    assert config.listen_address == "0.0.0.0:9000"
    assert config.store_path == str(tmp_path / "db")
    assert config.auto_approve is True
    assert config.max_reschedules == DEFAULT_MAX_RESCHEDULES
    assert load_endpoints()["bookkeeping"] == "http://0.0.0.0:9000/bookkeeping"


def test_service_config_validation() -> None:
    with pytest.raises(ConfigError):
        ServiceConfig(max_reschedules=0)
    with pytest.raises(ConfigError):
        ServiceConfig(listen_address="nowhere")
