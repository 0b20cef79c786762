"""
scenario.py
Whole-system simulation: central services, one agent per site and the site
simulator, driven in simulated time from a line-oriented scenario file.

Scenario file grammar (one statement per line, '#' starts a comment):

    seed 42
    duration 864000
    poll_interval 600
    max_reschedules 3
    auto_approve true
    reschedule_causes submission_failure,software_unavailable
    registration_sends 1
    storage_element CERN-CASTOR
    site CERN slots=20 cpu=1.5 app_fail=0.02 site_fail=0.06
    portal EDG inner=EDG-WN1,EDG-WN2
    package Gauss v1 deps=Geant/v4
    workflow mc
    step Gauss v1 out=sim opt.nevents=100
    step Boole v2 in=sim out=digi
    run mc events=1000 per_job=100 spe=36
"""

import logging
import shutil
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Optional, Tuple, Union

import numpy as np

from components.exceptions import InvalidParameters
from components.model import JobState, StepDefinition, WorkflowDefinition
from components.portal import PortalAgent
from components.site_simulator import FailurePolicy, SiteConfig, SiteSimulator
from services.agent_service import ProductionAgent
from services.config import AgentConfig, ServiceConfig, parse_bool
from services.job_table import load_history
from services.rpc import ClientBundle, ServiceBundle
from services.software_repository import build_package
from services.store import StoreHandle

logger = logging.getLogger("scenario")

# site key -> (SiteConfig/FailurePolicy field, parser)
_SITE_KEYS = {
    "slots": ("slot_count", int),
    "cpu": ("cpu_power", float),
    "disk": ("disk_quota_mb", int),
    "shared": ("shared_area_writable", parse_bool),
    "wn_outbound": ("wn_outbound_connectivity", parse_bool),
    "bandwidth": ("bandwidth_mb_s", float),
}
_POLICY_KEYS = {
    "app_fail": "app_failure_prob",
    "site_fail": "site_failure_prob",
    "transfer_fail": "transfer_failure_prob",
    "submit_fail": "submission_failure_prob",
    "corrupt": "transfer_corruption_prob",
    "hazard": "duration_failure_rate",
}
_RUN_KEYS = {
    "events": ("total_events", int),
    "per_job": ("events_per_job", int),
    "dest": ("destination_site", str),
    "spe": ("seconds_per_event", float),
    "bpe": ("bytes_per_event", int),
    "min_cpu": ("min_cpu_power", float),
    "min_disk": ("min_disk_mb", int),
}


@dataclass
class RunSpec:
    workflow: str
    params: Dict[str, Any]


@dataclass
class Scenario:
    seed: int = 0
    duration: float = 60 * 86400.0
    poll_interval: float = 600.0
    max_reschedules: int = 3
    auto_approve: bool = True
    reschedule_causes: FrozenSet[str] = frozenset({"submission_failure", "software_unavailable"})
    registration_sends: int = 1
    occupancy_threshold: float = 1.0
    max_transfer_attempts: int = 10
    storage_element: str = "CERN-CASTOR"
    sites: Dict[str, SiteConfig] = field(default_factory=dict)
    # per-site agent options: relay, fill
    agent_options: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    packages: List[Tuple[str, str, Tuple[Tuple[str, str], ...]]] = field(default_factory=list)
    workflows: Dict[str, List[StepDefinition]] = field(default_factory=dict)
    runs: List[RunSpec] = field(default_factory=list)

    @property
    def inner_sites(self) -> FrozenSet[str]:
        return frozenset(inner for site in self.sites.values() for inner in site.inner_sites)

    @property
    def agent_sites(self) -> List[str]:
        return sorted(set(self.sites) - self.inner_sites)


def _key_values(tokens: List[str], number: int) -> Dict[str, str]:
    pairs = {}
    for token in tokens:
        if "=" not in token:
            raise InvalidParameters(f"line {number}: expected key=value, got '{token}'")
        key, value = token.split("=", 1)
        pairs[key] = value
    return pairs


def _site(site_id: str, pairs: Dict[str, str], number: int, inner_sites: Tuple[str, ...] = ()) -> Tuple[SiteConfig, Dict[str, Any]]:
    site_kwargs: Dict[str, Any] = {"slot_count": 1 if inner_sites else 4}
    policy_kwargs: Dict[str, Any] = {}
    agent: Dict[str, Any] = {}
    try:
        for key, value in pairs.items():
            if key in _SITE_KEYS:
                name, parser = _SITE_KEYS[key]
                site_kwargs[name] = parser(value)
            elif key in _POLICY_KEYS:
                policy_kwargs[_POLICY_KEYS[key]] = float(value)
            elif key == "seed":
                policy_kwargs["rng_seed"] = int(value)
            elif key == "relay":
                agent["relay"] = parse_bool(value)
            elif key == "fill":
                agent["fill_target"] = int(value)
            elif key == "inner":
                continue
            else:
                raise InvalidParameters(f"line {number}: unknown site key '{key}'")
        config = SiteConfig(site_id, failure_policy=FailurePolicy(**policy_kwargs), inner_sites=inner_sites, **site_kwargs)
    except ValueError as exc:
        raise InvalidParameters(f"line {number}: {exc}")
    agent["explicit_seed"] = "rng_seed" in policy_kwargs
    return config, agent


def parse_scenario(text: str) -> Scenario:
    """
    Raises:
        InvalidParameters: With the offending line number.
    """
    scenario = Scenario()
    current: Optional[str] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        tokens = raw.split("#", 1)[0].split()
        if not tokens:
            continue
        keyword, args = tokens[0], tokens[1:]
        try:
            if keyword in ("seed", "max_reschedules", "registration_sends", "max_transfer_attempts"):
                setattr(scenario, keyword, int(args[0]))
            elif keyword in ("duration", "poll_interval", "occupancy_threshold"):
                setattr(scenario, keyword, float(args[0]))
            elif keyword == "auto_approve":
                scenario.auto_approve = parse_bool(args[0])
            elif keyword == "reschedule_causes":
                scenario.reschedule_causes = frozenset(c for c in (args[0] if args else "").split(",") if c)
            elif keyword == "storage_element":
                scenario.storage_element = args[0]
            elif keyword in ("site", "portal"):
                site_id, pairs = args[0], _key_values(args[1:], number)
                if site_id in scenario.sites:
                    raise InvalidParameters(f"line {number}: site {site_id} defined twice")
                inner = tuple(s for s in pairs.get("inner", "").split(",") if s)
                if keyword == "portal" and not inner:
                    raise InvalidParameters(f"line {number}: portal {site_id} needs inner=...")
                config, agent = _site(site_id, pairs, number, inner)
                scenario.sites[site_id] = config
                scenario.agent_options[site_id] = agent
            elif keyword == "package":
                app, version = args[0], args[1]
                pairs = _key_values(args[2:], number)
                deps = tuple(tuple(d.split("/", 1)) for d in pairs.get("deps", "").split(",") if d)
                scenario.packages.append((app, version, deps))
            elif keyword == "workflow":
                current = args[0]
                scenario.workflows[current] = []
            elif keyword == "step":
                if current is None:
                    raise InvalidParameters(f"line {number}: step outside a workflow")
                pairs = _key_values(args[2:], number)
                options = tuple((k[len("opt."):], v) for k, v in pairs.items() if k.startswith("opt."))
                scenario.workflows[current].append(
                    StepDefinition(
                        application=args[0],
                        app_version=args[1],
                        options=options,
                        input_types=frozenset(t for t in pairs.get("in", "").split(",") if t),
                        output_types=frozenset(t for t in pairs.get("out", "").split(",") if t),
                    )
                )
            elif keyword == "run":
                pairs = _key_values(args[1:], number)
                params = {}
                for key, value in pairs.items():
                    if key not in _RUN_KEYS:
                        raise InvalidParameters(f"line {number}: unknown run key '{key}'")
                    name, parser = _RUN_KEYS[key]
                    params[name] = parser(value)
                scenario.runs.append(RunSpec(args[0], params))
            else:
                raise InvalidParameters(f"line {number}: unknown statement '{keyword}'")
        except IndexError:
            raise InvalidParameters(f"line {number}: '{keyword}' is missing arguments")
        except ValueError as exc:
            raise InvalidParameters(f"line {number}: {exc}")

    for site in scenario.sites.values():
        for inner in site.inner_sites:
            if inner not in scenario.sites:
                raise InvalidParameters(f"portal {site.site_id} names unknown inner site {inner}")
    for run in scenario.runs:
        if run.workflow not in scenario.workflows:
            raise InvalidParameters(f"run references unknown workflow '{run.workflow}'")
    return _seed_sites(scenario)


def _seed_sites(scenario: Scenario) -> Scenario:
    """Give every site without an explicit seed its own stream derived from the scenario seed."""
    for index, site_id in enumerate(sorted(scenario.sites)):
        if scenario.agent_options[site_id].get("explicit_seed"):
            continue
        derived = int(np.random.SeedSequence([scenario.seed, index]).generate_state(1, dtype=np.uint64)[0])
        site = scenario.sites[site_id]
        scenario.sites[site_id] = replace(site, failure_policy=replace(site.failure_policy, rng_seed=derived))
    return scenario


def load_scenario(path: Union[str, Path]) -> Scenario:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InvalidParameters(f"cannot read scenario {path}: {exc}")
    return parse_scenario(text)


@dataclass
class ScenarioResult:
    bundle: ServiceBundle
    clients: ClientBundle
    sim: SiteSimulator
    agents: Dict[str, ProductionAgent]
    accounting: Dict[str, Any]
    cycles: int
    finished_at: float
    wall_seconds: float

    @property
    def event_log(self) -> List[str]:
        return self.sim.event_log


def failure_cause(note: str) -> str:
    """Failure class from a Failed note of the form '<cause>: <detail>'."""
    return note.split(":", 1)[0].strip() or "unknown"


def collect_accounting(bundle: ServiceBundle) -> Dict[str, Any]:
    """Final production accounting: job outcomes, failure classes, datasets and stored bytes."""

    def work(tx) -> Dict[str, Any]:
        states: Counter = Counter()
        causes: Counter = Counter()
        attempts = 0
        for job_id, rec in tx.scan("job_records"):
            state = JobState(rec["state"])
            states[state.value] += 1
            attempts += int(rec.get("attempt", 1))
            if state == JobState.FAILED:
                notes = [m.note for m in load_history(tx, job_id) if m.reported_state == JobState.FAILED and m.route != "service"]
                causes[failure_cause(notes[-1]) if notes else "unknown"] += 1
        return {"states": states, "causes": causes, "attempts": attempts}

    raw = bundle.store.transact(work)
    total = sum(raw["states"].values())
    done = raw["states"].get(JobState.DONE.value, 0)
    datasets = bundle.bookkeeping.query_datasets()
    stored = sum(d.size_bytes for d, replicas in datasets if replicas)
    return {
        "jobs_total": total,
        "jobs_done": done,
        "jobs_failed": raw["states"].get(JobState.FAILED.value, 0),
        "jobs_unfinished": total - done - raw["states"].get(JobState.FAILED.value, 0),
        "failed_by_cause": dict(sorted(raw["causes"].items())),
        "success_rate": done / total if total else 0.0,
        "reschedules": raw["attempts"] - total,
        "datasets": len(datasets),
        "datasets_replicated": sum(1 for _, replicas in datasets if replicas),
        "bytes_stored": stored,
        "dataset_counts": bundle.bookkeeping.counts(),
    }


def build_agents(scenario: Scenario, clients: ClientBundle, sim: SiteSimulator, work_dir: Path) -> Dict[str, ProductionAgent]:
    agents: Dict[str, ProductionAgent] = {}
    for site_id in scenario.agent_sites:
        site = scenario.sites[site_id]
        options = scenario.agent_options[site_id]
        capacity = sum(scenario.sites[s].slot_count for s in site.inner_sites) if site.is_portal else site.slot_count
        config = AgentConfig(
            site_id=site_id,
            fill_target=options.get("fill_target", capacity),
            occupancy_threshold=scenario.occupancy_threshold,
            poll_interval=scenario.poll_interval,
            storage_element=scenario.storage_element,
            max_transfer_attempts_per_cycle=scenario.max_transfer_attempts,
            work_dir=str(work_dir / site_id),
            relay=options.get("relay", False),
            reschedule_causes=scenario.reschedule_causes,
            disk_quota_mb=site.disk_quota_mb,
            shared_area_writable=site.shared_area_writable,
            cpu_power=site.cpu_power,
            slot_count=site.slot_count,
            registration_sends=scenario.registration_sends,
        )
        agent_cls = PortalAgent if site.is_portal else ProductionAgent
        agents[site_id] = agent_cls(config, clients, sim)
    return agents


def prepare_production(scenario: Scenario, clients: ClientBundle) -> List[str]:
    """Publish the software, define the workflows and create the runs; returns the run ids."""
    for app, version, deps in scenario.packages:
        clients.software.publish(build_package(app, version, dependencies=deps))
    workflow_ids = {}
    for name, steps in scenario.workflows.items():
        workflow_ids[name] = clients.production.define_workflow(WorkflowDefinition("", name, 1, tuple(steps)))
    run_ids = []
    for index, run in enumerate(scenario.runs):
        run_id, _ = clients.production.create_run(workflow_ids[run.workflow], request_token=f"scenario-{index}", **run.params)
        run_ids.append(run_id)
    return run_ids


def run_scenario(scenario: Scenario, work_dir: Union[str, Path], max_cycles: Optional[int] = None) -> ScenarioResult:
    """
    Replay a scenario to completion (or until its duration elapses).

    Every poll interval the simulator is advanced, then each agent runs one
    cycle in site order. The replay stops once nothing is waiting centrally
    and every agent is idle.
    """
    started = time.perf_counter()
    work_dir = Path(work_dir)
    if work_dir.exists():
        shutil.rmtree(work_dir)
    work_dir.mkdir(parents=True)

    sim = SiteSimulator(scenario.sites[s] for s in sorted(scenario.sites))
    service_config = ServiceConfig(
        store_path=None,
        max_reschedules=scenario.max_reschedules,
        auto_approve=scenario.auto_approve,
        fsync=False,
    )
    bundle = ServiceBundle.create(service_config, store=StoreHandle.open(None), clock=lambda: sim.clock.now)
    clients = ClientBundle.loopback(bundle)
    prepare_production(scenario, clients)
    agents = build_agents(scenario, clients, sim, work_dir)

    now = 0.0
    cycles = 0
    while now <= scenario.duration:
        # Transfers of the previous cycle may have moved simulated time past now
        now = max(now, sim.clock.now)
        sim.advance(now)
        for site_id in sorted(agents):
            agents[site_id].run_cycle(now)
        cycles += 1
        if bundle.production.waiting_count() == 0 and all(a.is_idle() for a in agents.values()):
            break
        if max_cycles is not None and cycles >= max_cycles:
            break
        now += scenario.poll_interval

    accounting = collect_accounting(bundle)
    wall = time.perf_counter() - started
    logger.info(
        f"Scenario finished at t={now:.0f} after {cycles} cycles ({wall:.1f}s): "
        f"{accounting['jobs_done']}/{accounting['jobs_total']} done"
    )
    return ScenarioResult(bundle, clients, sim, agents, accounting, cycles, now, wall)
