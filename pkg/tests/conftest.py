import logging
from pathlib import Path
from typing import Dict, List, Optional

import pytest

from components.model import StepDefinition, WorkflowDefinition
from components.site_simulator import SiteConfig, SiteSimulator
from services.agent_service import ProductionAgent
from services.config import AgentConfig, ServiceConfig
from services.rpc import ClientBundle, ServiceBundle
from services.software_repository import build_package
from services.store import StoreHandle

logging.getLogger("matplotlib").setLevel(logging.WARNING)


class FakeClock:
    def __init__(self, now: float = 0.0):
        self.now = now

    def __call__(self) -> float:
        return self.now


def gauss_step(**kwargs) -> StepDefinition:
    defaults = dict(application="Gauss", app_version="v1", options=(("generator", "pythia"),), output_types=frozenset({"sim"}))
    defaults.update(kwargs)
    return StepDefinition(**defaults)


def boole_step(**kwargs) -> StepDefinition:
    defaults = dict(application="Boole", app_version="v2", input_types=frozenset({"sim"}), output_types=frozenset({"digi"}))
    defaults.update(kwargs)
    return StepDefinition(**defaults)


def two_step_workflow(name: str = "mc") -> WorkflowDefinition:
    return WorkflowDefinition("", name, 1, (gauss_step(), boole_step()))


@pytest.fixture
def clock() -> FakeClock:
    return FakeClock(1000.0)


@pytest.fixture
def store() -> StoreHandle:
    return StoreHandle.open(None)


@pytest.fixture
def bundle(store: StoreHandle, clock: FakeClock) -> ServiceBundle:
    config = ServiceConfig(store_path=None, max_reschedules=3, auto_approve=False, fsync=False)
    return ServiceBundle.create(config, store=store, clock=clock)


@pytest.fixture
def clients(bundle: ServiceBundle) -> ClientBundle:
    return ClientBundle.loopback(bundle)


def publish_standard_packages(clients: ClientBundle) -> None:
    clients.software.publish(build_package("Geant", "v4"))
    clients.software.publish(build_package("Gauss", "v1", dependencies=[("Geant", "v4")]))
    clients.software.publish(build_package("Boole", "v2"))


def make_agent(
    tmp_path: Path,
    clients: ClientBundle,
    sites: Optional[List[SiteConfig]] = None,
    site_id: str = "CERN",
    sim: Optional[SiteSimulator] = None,
    **options,
) -> ProductionAgent:
    """An agent for ``site_id`` over a fresh simulator, working under tmp_path/site_id."""
    if sim is None:
        sim = SiteSimulator(sites or [SiteConfig(site_id, slot_count=4)])
    config_kwargs: Dict = dict(site_id=site_id, fill_target=4, occupancy_threshold=0.8, work_dir=str(tmp_path / site_id))
    config_kwargs.update(options)
    return ProductionAgent(AgentConfig(**config_kwargs), clients, sim)
