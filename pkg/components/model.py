"""
model.py
Domain types of the production system: the task hierarchy (workflow, run, job),
the job lifecycle state machine, dataset and replica records, and the pure
matching/splitting logic shared by the services and the agent.
"""

import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple

from components.exceptions import InvalidParameters, InvalidPipeline, MismatchedWorkflow

OptionPairs = Tuple[Tuple[str, str], ...]
SoftwareRef = Tuple[str, str]


def checksum32(data: bytes) -> int:
    """32-bit checksum used for journal records, payloads and datasets."""
    return zlib.crc32(data) & 0xFFFFFFFF


class JobState(str, Enum):
    CREATED = "Created"
    WAITING = "Waiting"
    ASSIGNED = "Assigned"
    INSTALLING = "Installing"
    SUBMITTED = "Submitted"
    RUNNING = "Running"
    TRANSFERRING = "Transferring"
    DONE = "Done"
    FAILED = "Failed"


_FORWARD = [
    (JobState.CREATED, JobState.WAITING),
    (JobState.WAITING, JobState.ASSIGNED),
    (JobState.ASSIGNED, JobState.INSTALLING),
    (JobState.INSTALLING, JobState.SUBMITTED),
    (JobState.SUBMITTED, JobState.RUNNING),
    (JobState.RUNNING, JobState.TRANSFERRING),
    (JobState.TRANSFERRING, JobState.DONE),
]
ACTIVE_STATES = (
    JobState.ASSIGNED,
    JobState.INSTALLING,
    JobState.SUBMITTED,
    JobState.RUNNING,
    JobState.TRANSFERRING,
)
LEGAL_TRANSITIONS: FrozenSet[Tuple[JobState, JobState]] = frozenset(
    _FORWARD + [(state, JobState.FAILED) for state in ACTIVE_STATES]
)
# Only the production service may take a job back out of Failed.
RESCHEDULE_TRANSITION = (JobState.FAILED, JobState.WAITING)


def validate_transition(from_state: JobState, to_state: JobState, rescheduling: bool = False) -> bool:
    """Return True iff the lifecycle allows moving from ``from_state`` to ``to_state``."""
    if (from_state, to_state) in LEGAL_TRANSITIONS:
        return True
    return rescheduling and (from_state, to_state) == RESCHEDULE_TRANSITION


def is_terminal(state: JobState) -> bool:
    """Done is final; Failed is final unless the job gets rescheduled."""
    return state in (JobState.DONE, JobState.FAILED)


def _pairs(items: Iterable[Any]) -> OptionPairs:
    return tuple((str(k), str(v)) for k, v in items)


@dataclass(frozen=True)
class StepDefinition:
    application: str
    app_version: str
    options: OptionPairs = ()
    input_types: FrozenSet[str] = frozenset()
    output_types: FrozenSet[str] = frozenset()

    def __post_init__(self):
        if not self.application or not self.app_version:
            raise InvalidParameters("step application and app_version must be non-empty")
        if not self.output_types:
            raise InvalidParameters(f"step {self.application}/{self.app_version} declares no output types")
        object.__setattr__(self, "options", _pairs(self.options))
        object.__setattr__(self, "input_types", frozenset(self.input_types))
        object.__setattr__(self, "output_types", frozenset(self.output_types))

    def to_record(self) -> Dict[str, Any]:
        return {
            "application": self.application,
            "app_version": self.app_version,
            "options": [list(pair) for pair in self.options],
            "input_types": sorted(self.input_types),
            "output_types": sorted(self.output_types),
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "StepDefinition":
        return cls(
            application=rec["application"],
            app_version=rec["app_version"],
            options=_pairs(rec.get("options", [])),
            input_types=frozenset(rec.get("input_types", [])),
            output_types=frozenset(rec.get("output_types", [])),
        )


def check_pipeline(steps: Iterable[StepDefinition]) -> Optional[int]:
    """Return the index of the first step whose inputs its predecessor does not produce."""
    steps = list(steps)
    for index in range(1, len(steps)):
        if not steps[index].input_types <= steps[index - 1].output_types:
            return index
    return None


@dataclass(frozen=True)
class WorkflowDefinition:
    workflow_id: str
    name: str
    version: int
    steps: Tuple[StepDefinition, ...]
    created_at: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.name:
            raise InvalidParameters("workflow name must be non-empty")
        if self.version < 1:
            raise InvalidParameters("workflow version must be positive")
        if not self.steps:
            raise InvalidPipeline(0, "workflow has no steps")
        bad = check_pipeline(self.steps)
        if bad is not None:
            raise InvalidPipeline(bad)

    def to_record(self) -> Dict[str, Any]:
        return {
            "workflow_id": self.workflow_id,
            "name": self.name,
            "version": self.version,
            "steps": [step.to_record() for step in self.steps],
            "created_at": self.created_at,
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "WorkflowDefinition":
        return cls(
            workflow_id=rec["workflow_id"],
            name=rec["name"],
            version=int(rec["version"]),
            steps=tuple(StepDefinition.from_record(s) for s in rec["steps"]),
            created_at=float(rec.get("created_at", 0.0)),
        )


@dataclass(frozen=True)
class ProductionRun:
    run_id: str
    workflow_id: str
    total_events: int
    events_per_job: int
    extra_options: OptionPairs = ()
    destination_site: Optional[str] = None
    created_at: float = 0.0
    min_cpu_power: float = 0.0
    min_disk_mb: int = 0
    seconds_per_event: float = 1.0
    bytes_per_event: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "extra_options", _pairs(self.extra_options))
        if self.events_per_job < 1:
            raise InvalidParameters("events_per_job must be at least 1")
        # A run smaller than one job is still a valid single-job run.
        if self.total_events < 1:
            raise InvalidParameters("total_events must be positive")
        if self.min_cpu_power < 0 or self.min_disk_mb < 0:
            raise InvalidParameters("resource requirements must be non-negative")
        if self.seconds_per_event < 0 or self.bytes_per_event < 0:
            raise InvalidParameters("workload parameters must be non-negative")

    def to_record(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "workflow_id": self.workflow_id,
            "total_events": self.total_events,
            "events_per_job": self.events_per_job,
            "extra_options": [list(pair) for pair in self.extra_options],
            "destination_site": self.destination_site,
            "created_at": self.created_at,
            "min_cpu_power": self.min_cpu_power,
            "min_disk_mb": self.min_disk_mb,
            "seconds_per_event": self.seconds_per_event,
            "bytes_per_event": self.bytes_per_event,
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "ProductionRun":
        return cls(
            run_id=rec["run_id"],
            workflow_id=rec["workflow_id"],
            total_events=int(rec["total_events"]),
            events_per_job=int(rec["events_per_job"]),
            extra_options=_pairs(rec.get("extra_options", [])),
            destination_site=rec.get("destination_site"),
            created_at=float(rec.get("created_at", 0.0)),
            min_cpu_power=float(rec.get("min_cpu_power", 0.0)),
            min_disk_mb=int(rec.get("min_disk_mb", 0)),
            seconds_per_event=float(rec.get("seconds_per_event", 1.0)),
            bytes_per_event=int(rec.get("bytes_per_event", 1000)),
        )


@dataclass(frozen=True)
class JobRequirements:
    destination_site: Optional[str] = None
    min_cpu_power: float = 0.0
    min_disk_mb: int = 0
    software: Tuple[SoftwareRef, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "software", _pairs(self.software))

    def to_record(self) -> Dict[str, Any]:
        return {
            "destination_site": self.destination_site,
            "min_cpu_power": self.min_cpu_power,
            "min_disk_mb": self.min_disk_mb,
            "software": [list(pair) for pair in self.software],
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "JobRequirements":
        return cls(
            destination_site=rec.get("destination_site"),
            min_cpu_power=float(rec.get("min_cpu_power", 0.0)),
            min_disk_mb=int(rec.get("min_disk_mb", 0)),
            software=_pairs(rec.get("software", [])),
        )


@dataclass(frozen=True)
class JobDescriptor:
    job_id: str
    run_id: str
    sequence_index: int
    events: int
    resolved_steps: Tuple[StepDefinition, ...]
    requirements: JobRequirements
    first_event_offset: int
    seconds_per_event: float = 1.0
    bytes_per_event: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "resolved_steps", tuple(self.resolved_steps))

    @property
    def nominal_runtime(self) -> float:
        return self.events * self.seconds_per_event

    def to_record(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "run_id": self.run_id,
            "sequence_index": self.sequence_index,
            "events": self.events,
            "resolved_steps": [step.to_record() for step in self.resolved_steps],
            "requirements": self.requirements.to_record(),
            "first_event_offset": self.first_event_offset,
            "seconds_per_event": self.seconds_per_event,
            "bytes_per_event": self.bytes_per_event,
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "JobDescriptor":
        return cls(
            job_id=rec["job_id"],
            run_id=rec["run_id"],
            sequence_index=int(rec["sequence_index"]),
            events=int(rec["events"]),
            resolved_steps=tuple(StepDefinition.from_record(s) for s in rec["resolved_steps"]),
            requirements=JobRequirements.from_record(rec["requirements"]),
            first_event_offset=int(rec["first_event_offset"]),
            seconds_per_event=float(rec.get("seconds_per_event", 1.0)),
            bytes_per_event=int(rec.get("bytes_per_event", 1000)),
        )


@dataclass(frozen=True)
class StatusMessage:
    job_id: str
    reported_state: JobState
    site_id: str
    timestamp: float
    note: str = ""
    step_index: Optional[int] = None
    attempt: Optional[int] = None
    cpu_seconds: float = 0.0
    route: str = "direct"
    flags: Tuple[str, ...] = ()

    MAX_NOTE = 1024

    def __post_init__(self):
        object.__setattr__(self, "reported_state", JobState(self.reported_state))
        object.__setattr__(self, "flags", tuple(self.flags))
        if len(self.note) > self.MAX_NOTE:
            object.__setattr__(self, "note", self.note[: self.MAX_NOTE])

    def dedup_key(self) -> Tuple[Any, ...]:
        return (self.job_id, self.attempt, self.reported_state.value, self.timestamp, self.step_index)

    def to_record(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "reported_state": self.reported_state.value,
            "site_id": self.site_id,
            "timestamp": self.timestamp,
            "note": self.note,
            "step_index": self.step_index,
            "attempt": self.attempt,
            "cpu_seconds": self.cpu_seconds,
            "route": self.route,
            "flags": list(self.flags),
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "StatusMessage":
        return cls(
            job_id=rec["job_id"],
            reported_state=JobState(rec["reported_state"]),
            site_id=rec.get("site_id", ""),
            timestamp=float(rec["timestamp"]),
            note=rec.get("note", ""),
            step_index=rec.get("step_index"),
            attempt=rec.get("attempt"),
            cpu_seconds=float(rec.get("cpu_seconds", 0.0)),
            route=rec.get("route", "direct"),
            flags=tuple(rec.get("flags", [])),
        )


@dataclass
class JobRecord:
    """Mutable lifecycle row; only ever changed inside a store transaction."""

    job_id: str
    state: JobState = JobState.CREATED
    site: Optional[str] = None
    batch_id: Optional[str] = None
    attempt: int = 1
    last_update: float = 0.0
    history: List[StatusMessage] = field(default_factory=list)
    excluded_sites: List[str] = field(default_factory=list)

    def to_record(self) -> Dict[str, Any]:
        return {
            "job_id": self.job_id,
            "state": self.state.value,
            "site": self.site,
            "batch_id": self.batch_id,
            "attempt": self.attempt,
            "last_update": self.last_update,
            "excluded_sites": list(self.excluded_sites),
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any], history: Optional[List[Dict[str, Any]]] = None) -> "JobRecord":
        return cls(
            job_id=rec["job_id"],
            state=JobState(rec["state"]),
            site=rec.get("site"),
            batch_id=rec.get("batch_id"),
            attempt=int(rec.get("attempt", 1)),
            last_update=float(rec.get("last_update", 0.0)),
            history=[StatusMessage.from_record(h) for h in (history or [])],
            excluded_sites=list(rec.get("excluded_sites", [])),
        )


@dataclass(frozen=True)
class ResourceCapability:
    site_id: str
    cpu_power: float
    free_disk_mb: int
    queue_occupancy: float = 0.0
    installed_software: FrozenSet[SoftwareRef] = frozenset()

    def __post_init__(self):
        if not self.site_id:
            raise InvalidParameters("capability must name a site")
        if self.cpu_power <= 0:
            raise InvalidParameters("cpu_power must be positive")
        if self.free_disk_mb < 0:
            raise InvalidParameters("free_disk_mb must be non-negative")
        if not 0.0 <= self.queue_occupancy <= 1.0:
            raise InvalidParameters("queue_occupancy must be within [0, 1]")
        object.__setattr__(self, "installed_software", frozenset(_pairs(self.installed_software)))

    def to_record(self) -> Dict[str, Any]:
        return {
            "site_id": self.site_id,
            "cpu_power": float(self.cpu_power),
            "free_disk_mb": int(self.free_disk_mb),
            "queue_occupancy": float(self.queue_occupancy),
            "installed_software": [list(pair) for pair in sorted(self.installed_software)],
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "ResourceCapability":
        return cls(
            site_id=rec["site_id"],
            cpu_power=float(rec["cpu_power"]),
            free_disk_mb=int(rec.get("free_disk_mb", 0)),
            queue_occupancy=float(rec.get("queue_occupancy", 0.0)),
            installed_software=frozenset(_pairs(rec.get("installed_software", []))),
        )


class DatasetStatus(str, Enum):
    PENDING = "Pending"
    APPROVED = "Approved"
    REJECTED = "Rejected"


@dataclass(frozen=True)
class DatasetDescription:
    lfn: str
    data_type: str
    job_id: str
    run_id: str
    events: int
    size_bytes: int
    checksum: int
    status: DatasetStatus = DatasetStatus.PENDING
    reason: str = ""

    def __post_init__(self):
        object.__setattr__(self, "status", DatasetStatus(self.status))
        if not self.lfn:
            raise InvalidParameters("dataset lfn must be non-empty")
        if self.events < 1:
            raise InvalidParameters("dataset events must be positive")
        if self.size_bytes < 0:
            raise InvalidParameters("dataset size must be non-negative")

    def content_key(self) -> Tuple[Any, ...]:
        """Identity of a registration, ignoring catalog status."""
        return (self.lfn, self.data_type, self.job_id, self.run_id, self.events, self.size_bytes, self.checksum)

    def with_status(self, status: DatasetStatus, reason: str = "") -> "DatasetDescription":
        return replace(self, status=status, reason=reason)

    def to_record(self) -> Dict[str, Any]:
        return {
            "lfn": self.lfn,
            "data_type": self.data_type,
            "job_id": self.job_id,
            "run_id": self.run_id,
            "events": self.events,
            "size_bytes": self.size_bytes,
            "checksum": self.checksum,
            "status": self.status.value,
            "reason": self.reason,
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "DatasetDescription":
        return cls(
            lfn=rec["lfn"],
            data_type=rec["data_type"],
            job_id=rec["job_id"],
            run_id=rec["run_id"],
            events=int(rec["events"]),
            size_bytes=int(rec["size_bytes"]),
            checksum=int(rec["checksum"]),
            status=DatasetStatus(rec.get("status", "Pending")),
            reason=rec.get("reason", ""),
        )


@dataclass(frozen=True)
class Replica:
    lfn: str
    storage_element: str
    url: str
    registered_at: float
    checksum: int

    def to_record(self) -> Dict[str, Any]:
        return {
            "lfn": self.lfn,
            "storage_element": self.storage_element,
            "url": self.url,
            "registered_at": self.registered_at,
            "checksum": self.checksum,
        }

    @classmethod
    def from_record(cls, rec: Dict[str, Any]) -> "Replica":
        return cls(
            lfn=rec["lfn"],
            storage_element=rec["storage_element"],
            url=rec["url"],
            registered_at=float(rec["registered_at"]),
            checksum=int(rec["checksum"]),
        )


def resolve_steps(steps: Iterable[StepDefinition], overrides: OptionPairs) -> Tuple[StepDefinition, ...]:
    """Apply run-level option overrides; only keys a step already has are replaced."""
    table = dict(overrides)
    resolved = []
    for step in steps:
        options = tuple((key, table.get(key, value)) for key, value in step.options)
        resolved.append(replace(step, options=options))
    return tuple(resolved)


def software_of(steps: Iterable[StepDefinition]) -> Tuple[SoftwareRef, ...]:
    """Distinct (application, version) pairs in first-use order."""
    seen: List[SoftwareRef] = []
    for step in steps:
        ref = (step.application, step.app_version)
        if ref not in seen:
            seen.append(ref)
    return tuple(seen)


def job_id_for(run_id: str, sequence_index: int) -> str:
    return f"{run_id}.{sequence_index:06d}"


def split_run(run: ProductionRun, workflow: WorkflowDefinition) -> List[JobDescriptor]:
    """Split a production run into schedulable jobs covering [0, total_events)."""
    if run.workflow_id != workflow.workflow_id:
        raise MismatchedWorkflow(f"run {run.run_id} references {run.workflow_id}, not {workflow.workflow_id}")

    steps = resolve_steps(workflow.steps, run.extra_options)
    requirements = JobRequirements(
        destination_site=run.destination_site,
        min_cpu_power=run.min_cpu_power,
        min_disk_mb=run.min_disk_mb,
        software=software_of(steps),
    )
    count = math.ceil(run.total_events / run.events_per_job)
    jobs = []
    for index in range(count):
        offset = index * run.events_per_job
        jobs.append(
            JobDescriptor(
                job_id=job_id_for(run.run_id, index),
                run_id=run.run_id,
                sequence_index=index,
                events=min(run.events_per_job, run.total_events - offset),
                resolved_steps=steps,
                requirements=requirements,
                first_event_offset=offset,
                seconds_per_event=run.seconds_per_event,
                bytes_per_event=run.bytes_per_event,
            )
        )
    return jobs


def match_job(req: JobRequirements, cap: ResourceCapability) -> bool:
    """Pull-side matching. Software is installed on demand, so it is not a criterion."""
    if req.destination_site is not None and req.destination_site != cap.site_id:
        return False
    return cap.cpu_power >= req.min_cpu_power and cap.free_disk_mb >= req.min_disk_mb


@dataclass(frozen=True)
class OutputSpec:
    lfn: str
    data_type: str
    step_index: int
    size_bytes: int


def output_datasets(job: JobDescriptor) -> List[OutputSpec]:
    """Datasets a synthetic workload produces: one per output type of every step."""
    outputs = []
    for index, step in enumerate(job.resolved_steps):
        for data_type in sorted(step.output_types):
            outputs.append(
                OutputSpec(
                    lfn=f"/pullgrid/{job.run_id}/{job.job_id}/{index:02d}_{step.application}.{data_type}",
                    data_type=data_type,
                    step_index=index,
                    size_bytes=job.events * job.bytes_per_event,
                )
            )
    return outputs


def dataset_checksum(lfn: str, size_bytes: int) -> int:
    """Deterministic content checksum of a synthetic output file."""
    return checksum32(f"{lfn}:{size_bytes}".encode("utf-8"))
