"""
agent_service.py
The production agent: a per-site daemon that keeps the local batch queue fed
with jobs pulled from the production service, installs the software they need,
and brings their outputs home through a durable outbox.
"""

import json
import logging
import os
import time
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

from components.exceptions import (
    BatchSubmissionFailed,
    ChecksumMismatch,
    IllegalState,
    InsufficientDisk,
    InvalidParameters,
    IoFailure,
    MalformedDocument,
    NotInstalled,
    PullGridError,
    RejectedDataset,
    ServiceUnreachable,
    UnknownLfn,
    UnknownPackage,
)
from components.file_lock import get_lock
from components.model import (
    DatasetDescription,
    JobDescriptor,
    JobRequirements,
    JobState,
    Replica,
    ResourceCapability,
    StatusMessage,
    dataset_checksum,
    output_datasets,
)
from components.protocol import dataset_to_xml, job_from_xml, job_to_xml, status_to_struct
from components.site_simulator import BatchJob, SimFile, SiteConfig, SiteSimulator
from services.config import AgentConfig
from services.rpc import ClientBundle
from services.software_repository import BOOTSTRAP_NAME, InstallArea, InstallReport

logger = logging.getLogger("agent_service")

STATE_NAME = "agent-state.json"
BATCH_NAME = "batch-system.json"
LOCK_NAME = "agent.lock"
LOG_BYTES = 4096

KIND_DATASET = "dataset"
KIND_LOG = "log"
KIND_METADATA = "metadata"

CAUSE_SOFTWARE = "software_unavailable"
CAUSE_SUBMISSION = "submission_failure"
CAUSE_SITE = "site_failure"
CAUSE_TRANSFER = "transfer_failure"


def log_name(job: JobDescriptor) -> str:
    return f"/pullgrid/logs/{job.run_id}/{job.job_id}.log"


def compute_occupancy(batch_state: Dict[str, Any], owned: Optional[set] = None) -> float:
    """
    Fraction of the batch capacity taken by this agent's queued and running jobs.

    Args:
        batch_state: Snapshot from SiteSimulator.batch_status.
        owned: Batch ids belonging to this agent; None counts every job on the queue.

    Returns:
        float: Occupancy clamped to [0, 1].
    """
    slots = batch_state.get("slot_count", 0)
    if slots <= 0:
        return 1.0
    if owned is None:
        busy = batch_state.get("queued", 0) + batch_state.get("running", 0)
    else:
        busy = sum(
            1 for batch_id, state in batch_state.get("jobs", {}).items() if batch_id in owned and state in ("queued", "running")
        )
    return max(0.0, min(1.0, busy / slots))


# ---------------------------------------------------------------------- #
# Outbox
# ---------------------------------------------------------------------- #
@dataclass
class OutboxEntry:
    entry_id: str
    kind: str
    local_path: str
    destination: str
    job_id: str
    lfn: Optional[str] = None
    attempts: int = 0
    created_at: float = 0.0
    payload: Dict[str, Any] = field(default_factory=dict)


class Outbox:
    """
    Durable spool of outbound transfers and service calls.

    Every entry is a ``<seq>-<kind>.entry`` file with a ``.meta`` sidecar. The
    sidecar is written first and the entry file last; deleting the entry file
    is the commit of a delivery. A sidecar without its entry file is debris
    from an interrupted add or remove and is discarded on open.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._entries: Dict[str, OutboxEntry] = {}
        self._seq = 0
        self._recover()

    def _recover(self) -> None:
        for meta in sorted(self.root.glob("*.meta")):
            entry_file = meta.with_suffix(".entry")
            if not entry_file.exists():
                logger.warning(f"Discarding orphan outbox sidecar {meta.name}")
                meta.unlink()
                continue
            try:
                entry = OutboxEntry(**json.loads(meta.read_text(encoding="utf-8")))
            except (ValueError, TypeError) as exc:
                raise IoFailure(f"unreadable outbox sidecar {meta}: {exc}")
            self._entries[entry.entry_id] = entry
        for entry_file in self.root.glob("*.entry"):
            if entry_file.stem not in self._entries:
                logger.warning(f"Discarding outbox entry {entry_file.name} without sidecar")
                entry_file.unlink()
        for entry_id in self._entries:
            self._seq = max(self._seq, int(entry_id.split("-", 1)[0]))

    def _write_meta(self, entry: OutboxEntry) -> None:
        meta = self.root / f"{entry.entry_id}.meta"
        tmp = meta.with_suffix(".meta.tmp")
        tmp.write_text(json.dumps(asdict(entry), sort_keys=True), encoding="utf-8")
        os.replace(tmp, meta)

    def add(
        self,
        kind: str,
        local_path: str,
        destination: str,
        job_id: str,
        now: float,
        lfn: Optional[str] = None,
        payload: Optional[Dict[str, Any]] = None,
    ) -> OutboxEntry:
        self._seq += 1
        entry = OutboxEntry(
            entry_id=f"{self._seq:08d}-{kind}",
            kind=kind,
            local_path=local_path,
            destination=destination,
            job_id=job_id,
            lfn=lfn,
            created_at=now,
            payload=dict(payload or {}),
        )
        self._write_meta(entry)
        (self.root / f"{entry.entry_id}.entry").write_text(local_path + "\n", encoding="utf-8")
        self._entries[entry.entry_id] = entry
        logger.debug(f"Spooled {entry.entry_id} for {job_id} -> {destination}")
        return entry

    def update(self, entry: OutboxEntry) -> None:
        self._write_meta(entry)

    def remove(self, entry: OutboxEntry) -> None:
        (self.root / f"{entry.entry_id}.entry").unlink(missing_ok=True)
        (self.root / f"{entry.entry_id}.meta").unlink(missing_ok=True)
        self._entries.pop(entry.entry_id, None)

    def entries(self) -> List[OutboxEntry]:
        """Pending entries, oldest first."""
        return [self._entries[key] for key in sorted(self._entries)]

    def has_pending_metadata(self, job_id: str) -> bool:
        return any(e.kind == KIND_METADATA and e.job_id == job_id for e in self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)


# ---------------------------------------------------------------------- #
# Agent
# ---------------------------------------------------------------------- #
@dataclass
class TrackedJob:
    job_id: str
    job_xml: str
    # assigned -> submitted -> transferring, or delegated for portal jobs
    phase: str = "assigned"
    batch_id: Optional[str] = None
    pending_lfns: List[str] = field(default_factory=list)
    outputs_total: int = 0
    cpu_seconds: float = 0.0
    area: Optional[str] = None

    @property
    def job(self) -> JobDescriptor:
        return job_from_xml(self.job_xml.encode("utf-8"))


@dataclass
class CycleReport:
    site_id: str
    now: float
    actions: List[Tuple[str, str, str]] = field(default_factory=list)

    def add(self, action: str, subject: str = "", detail: str = "") -> None:
        self.actions.append((action, subject, detail))

    def count(self, action: str) -> int:
        return sum(1 for a, _, _ in self.actions if a == action)

    @property
    def errors(self) -> List[Tuple[str, str, str]]:
        return [entry for entry in self.actions if entry[0] == "error"]


class ProductionAgent:
    def __init__(self, config: AgentConfig, clients: ClientBundle, sim: SiteSimulator, epoch: float = 0.0):
        """
        Args:
            config: Local customizations of this site.
            clients: RPC clients of the four central services.
            sim: The batch system and storage the agent drives.
            epoch: Offset added to simulated time when stamping status messages.
        """
        self.config = config
        self.clients = clients
        self.sim = sim
        self.epoch = epoch
        self.site_id = config.site_id
        self.outbox = Outbox(config.path(config.outbox_path))
        self.shared_area = InstallArea(config.path(config.install_area), quota_mb=config.disk_quota_mb)
        self.state_path = config.path(STATE_NAME)
        self.lock_path = config.path(config.lock_path or LOCK_NAME)
        self.jobs: Dict[str, TrackedJob] = self._load_state()
        self._budget: Optional[int] = None
        self._attach_hooks()

    def _attach_hooks(self) -> None:
        self.sim.set_worker_hook(self.site_id, self.on_worker_event)

    # ------------------------------------------------------------------ #
    # State persistence
    # ------------------------------------------------------------------ #
    def _load_state(self) -> Dict[str, TrackedJob]:
        if not self.state_path.exists():
            return {}
        try:
            raw = json.loads(self.state_path.read_text(encoding="utf-8"))
            return {job_id: TrackedJob(**rec) for job_id, rec in raw.items()}
        except (ValueError, TypeError) as exc:
            raise IoFailure(f"unreadable agent state {self.state_path}: {exc}")

    def _save_state(self) -> None:
        self.state_path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({k: asdict(v) for k, v in self.jobs.items()}, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.state_path)

    def save_batch_system(self) -> None:
        """Persist the simulated batch system so the next invocation resumes it."""
        path = self.config.path(BATCH_NAME)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"epoch": self.epoch, "batch": self.sim.snapshot()}, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    # ------------------------------------------------------------------ #
    # Cycle
    # ------------------------------------------------------------------ #
    def run_cycle(self, now: float) -> CycleReport:
        """
        One agent invocation: flush the outbox, finalize completed jobs, then pull new work.

        Args:
            now: Cycle timestamp. Messages are stamped no earlier than epoch plus simulated time.

        Returns:
            CycleReport: Every action taken, including errors of individual steps.
        """
        report = CycleReport(self.site_id, now)
        try:
            with get_lock(self.lock_path):
                self._budget = self.config.max_transfer_attempts_per_cycle
                for name, step in (
                    ("flush", self.flush_outbox),
                    ("finalize", self.finalize_completed),
                    ("pull", self.pull_jobs),
                ):
                    try:
                        step(self._stamp(now), report)
                    except Exception as exc:
                        # A failing step must not take the daemon down
                        logger.error(f"{self.site_id}: {name} step failed: {exc}")
                        logger.error(traceback.format_exc())
                        report.add("error", name, f"{type(exc).__name__}: {exc}")
        except IoFailure as exc:
            logger.warning(f"{self.site_id}: skipping cycle: {exc}")
            report.add("error", "lock", str(exc))
        finally:
            self._budget = None
        logger.info(
            f"{self.site_id} cycle at {now:.0f}: pulled={report.count('pulled')} "
            f"done={report.count('done')} failed={report.count('failed')} outbox={len(self.outbox)}"
        )
        return report

    def is_idle(self) -> bool:
        return not self.jobs and len(self.outbox) == 0

    # ------------------------------------------------------------------ #
    # Pulling
    # ------------------------------------------------------------------ #
    def batch_state(self) -> Dict[str, Any]:
        return self.sim.batch_status(self.site_id)

    def _owned_batch_ids(self) -> set:
        return {t.batch_id for t in self.jobs.values() if t.batch_id and t.phase in ("submitted", "delegated")}

    def _local_count(self) -> int:
        return sum(1 for t in self.jobs.values() if t.phase in ("assigned", "submitted", "delegated"))

    def _cpu_power(self) -> float:
        return self.sim.site(self.site_id).cpu_power

    def _capability(self, occupancy: float) -> ResourceCapability:
        used_mb = self.shared_area.used_bytes() // (1024 * 1024)
        return ResourceCapability(
            site_id=self.site_id,
            cpu_power=self._cpu_power(),
            free_disk_mb=max(0, self.config.disk_quota_mb - used_mb),
            queue_occupancy=occupancy,
            installed_software=frozenset(self.shared_area.list_installed()),
        )

    def pull_jobs(self, now: float, report: CycleReport) -> None:
        """Request jobs while the queue is below both the occupancy threshold and the fill target."""
        while True:
            occupancy = compute_occupancy(self.batch_state(), self._owned_batch_ids())
            local = self._local_count()
            if occupancy >= self.config.occupancy_threshold or local >= self.config.fill_target:
                report.add("gate", "", f"occupancy={occupancy:.2f} local={local}")
                return
            try:
                job = self.clients.production.request_job(self.site_id, self._capability(occupancy))
            except ServiceUnreachable as exc:
                logger.warning(f"{self.site_id}: production service unreachable, no pull: {exc}")
                report.add("pull_skipped", "", str(exc))
                return
            if job is None:
                report.add("no_work")
                return
            report.add("pulled", job.job_id)
            self.sim.record(self.site_id, "pulled", job.job_id)
            if not self.start_job(job, now, report):
                return

    def start_job(self, job: JobDescriptor, now: float, report: CycleReport) -> bool:
        """Install the job's software and hand it to the batch system. Returns False if it had to fail."""
        tracked = TrackedJob(job.job_id, job_to_xml(job).decode("utf-8"))
        self.jobs[job.job_id] = tracked
        self._save_state()
        self._report(job.job_id, JobState.INSTALLING, now, note=f"software {self._software_label(job.requirements)}")
        try:
            area = self._area_for(job)
            install = self.ensure_software(job.requirements, area)
            report.add("software", job.job_id, ",".join(f"{a}/{v}:{o}" for a, v, o in install.entries))
            batch_id = self.submit_to_batch(job, area)
        except (UnknownPackage, ServiceUnreachable, ChecksumMismatch, MalformedDocument, NotInstalled) as exc:
            self._fail(job.job_id, CAUSE_SOFTWARE, str(exc), now, report)
            return False
        except InsufficientDisk as exc:
            self._fail(job.job_id, CAUSE_SITE, str(exc), now, report)
            return False
        except BatchSubmissionFailed as exc:
            self._fail(job.job_id, CAUSE_SUBMISSION, str(exc), now, report)
            return False
        tracked.batch_id = batch_id
        tracked.phase = "submitted"
        tracked.area = str(area.root_path)
        self._save_state()
        self._report(job.job_id, JobState.SUBMITTED, now, note=f"batch id {batch_id}")
        report.add("submitted", job.job_id, batch_id)
        return True

    @staticmethod
    def _software_label(req: JobRequirements) -> str:
        return " ".join(f"{app}/{version}" for app, version in req.software) or "none"

    def _area_for(self, job: JobDescriptor) -> InstallArea:
        if self.config.shared_area_writable:
            return self.shared_area
        # Read-only shared area: install next to the job instead
        return InstallArea(self.config.path("jobs") / job.job_id / "software", quota_mb=self.config.disk_quota_mb)

    def ensure_software(self, req: JobRequirements, area: Optional[InstallArea] = None) -> InstallReport:
        """
        Make every application of the job available, fetching only what is missing.

        Raises:
            UnknownPackage, ServiceUnreachable, ChecksumMismatch, InsufficientDisk
        """
        area = area or self.shared_area
        report = InstallReport()
        seen = set()
        for app, version in req.software:
            if area.is_installed(app, version):
                if (app, version) not in seen:
                    report.add((app, version), "cached")
                    seen.add((app, version))
                continue
            for dep_app, dep_version, outcome in area.install(self.clients.software, app, version).entries:
                if (dep_app, dep_version) not in seen:
                    report.add((dep_app, dep_version), outcome)
                    seen.add((dep_app, dep_version))
        return report

    def wrapper_script(self, job: JobDescriptor, area: InstallArea) -> str:
        """Bootstrap plus the synthetic workload, one entry point call per step."""
        lines = ["#!/bin/sh", f"# pullgrid job {job.job_id}", "set -e"]
        for app, version in job.requirements.software:
            lines.append(f". {Path(area.root_path) / app / version / BOOTSTRAP_NAME}")
        for index, step in enumerate(job.resolved_steps):
            options = " ".join(f"--{key}={value}" for key, value in step.options)
            entry = area.entry_point(step.application, step.app_version)
            lines.append(f"pullgrid_report Running step={index}")
            lines.append(f"{entry} --events={job.events} --first={job.first_event_offset} {options}".rstrip())
        return "\n".join(lines) + "\n"

    def job_outputs(self, job: JobDescriptor) -> List[SimFile]:
        files = [SimFile(spec.lfn, spec.size_bytes, dataset_checksum(spec.lfn, spec.size_bytes)) for spec in output_datasets(job)]
        name = log_name(job)
        files.append(SimFile(name, LOG_BYTES, dataset_checksum(name, LOG_BYTES)))
        return files

    def submit_to_batch(self, job: JobDescriptor, area: Optional[InstallArea] = None) -> str:
        """
        Raises:
            BatchSubmissionFailed, NotInstalled
        """
        script = self.wrapper_script(job, area or self.shared_area)
        return self.sim.batch_submit(
            self.site_id,
            script,
            job.nominal_runtime,
            label=job.job_id,
            steps=len(job.resolved_steps),
            outputs=self.job_outputs(job),
        )

    # ------------------------------------------------------------------ #
    # Failures
    # ------------------------------------------------------------------ #
    def _fail(self, job_id: str, cause: str, detail: str, now: float, report: CycleReport) -> None:
        logger.warning(f"{self.site_id}: job {job_id} failed ({cause}): {detail}")
        self._report(job_id, JobState.FAILED, now, note=f"{cause}: {detail}")
        report.add("failed", job_id, cause)
        if self.jobs.pop(job_id, None) is not None:
            self._save_state()
        if cause in self.config.reschedule_causes:
            self.forward(job_id, "production", "rescheduleJob", [job_id, cause], now)
            report.add("reschedule", job_id, cause)

    # ------------------------------------------------------------------ #
    # Finalization
    # ------------------------------------------------------------------ #
    def _stamp(self, now: float) -> float:
        # Transfers move simulated time on; later messages must not predate earlier ones.
        return max(now, self.epoch + self.sim.clock.now)

    def finalize_completed(self, now: float, report: CycleReport) -> None:
        for job_id in sorted(self.jobs):
            tracked = self.jobs.get(job_id)
            if tracked is None:
                continue
            now = self._stamp(now)
            if tracked.phase == "assigned":
                # The agent stopped between pull and submission
                self._fail(job_id, CAUSE_SUBMISSION, "interrupted before batch submission", now, report)
                continue
            if tracked.phase != "submitted":
                continue
            try:
                batch = self.sim.batch_job(tracked.batch_id)
            except InvalidParameters:
                # The batch system restarted and forgot the job
                self._fail(job_id, CAUSE_SITE, f"batch job {tracked.batch_id} is unknown to the batch system", now, report)
                continue
            if batch.state in ("queued", "running"):
                continue
            if batch.state == "failed":
                self._fail(job_id, batch.outcome, f"batch job {batch.batch_id} ended with {batch.outcome}", now, report)
            else:
                tracked.cpu_seconds = batch.cpu_seconds
                produced = [f for f in (self.sim.local_file(self.site_id, o.name) for o in batch.outputs) if f is not None]
                self.finalize_job(tracked, produced, now, report)
            self.sim.forget(batch.batch_id)
        self._complete_ready(self._stamp(now), report)

    def finalize_job(self, tracked: TrackedJob, outputs: List[SimFile], now: float, report: CycleReport) -> None:
        """
        Queue every produced file for transfer and register the datasets.

        The job reaches Done once each dataset has a verified replica; until
        then it stays Transferring and the outbox retries on later cycles.
        """
        job = tracked.job
        specs = {spec.lfn: spec for spec in output_datasets(job)}
        self._report(job.job_id, JobState.TRANSFERRING, now, note=f"{len(outputs)} files to transfer")
        tracked.phase = "transferring"
        for produced in outputs:
            spec = specs.get(produced.name)
            if spec is None:
                self._retain_log(job, produced, now)
                self.outbox.add(
                    KIND_LOG,
                    produced.name,
                    self.config.log_storage_element,
                    job.job_id,
                    now,
                    payload={"checksum": produced.checksum, "size": produced.size_bytes, "transferred": False},
                )
                continue
            dataset = DatasetDescription(
                lfn=spec.lfn,
                data_type=spec.data_type,
                job_id=job.job_id,
                run_id=job.run_id,
                events=job.events,
                size_bytes=produced.size_bytes,
                checksum=produced.checksum,
            )
            xml = dataset_to_xml(dataset).decode("utf-8")
            for _ in range(self.config.registration_sends):
                self.forward(job.job_id, "bookkeeping", "registerDataset", [xml], now)
            self.outbox.add(
                KIND_DATASET,
                produced.name,
                self.config.storage_element,
                job.job_id,
                now,
                lfn=spec.lfn,
                payload={"checksum": produced.checksum, "size": produced.size_bytes, "transferred": False},
            )
            tracked.pending_lfns.append(spec.lfn)
            tracked.outputs_total += 1
        self._save_state()
        report.add("finalized", job.job_id, f"{tracked.outputs_total} datasets")
        self.flush_outbox(now, report, job_id=job.job_id)

    def _retain_log(self, job: JobDescriptor, produced: SimFile, now: float) -> None:
        path = self.config.path("logs") / f"{job.job_id}.log"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            f"job {job.job_id} run {job.run_id} site {self.site_id}\n"
            f"finished at {now:.3f}, {job.events} events\n"
            f"log {produced.name} checksum {produced.checksum:08x}\n",
            encoding="utf-8",
        )

    def _complete_ready(self, now: float, report: Optional[CycleReport]) -> None:
        for job_id in sorted(self.jobs):
            tracked = self.jobs[job_id]
            if tracked.phase != "transferring" or tracked.pending_lfns:
                continue
            note = "all datasets replicated" if tracked.outputs_total else "warning: job produced no output datasets"
            self._report(job_id, JobState.DONE, now, note=note, cpu_seconds=tracked.cpu_seconds)
            del self.jobs[job_id]
            self._save_state()
            if report is not None:
                report.add("done", job_id)

    # ------------------------------------------------------------------ #
    # Outbox delivery
    # ------------------------------------------------------------------ #
    def _take_budget(self) -> bool:
        if self._budget is None:
            return True
        if self._budget <= 0:
            return False
        self._budget -= 1
        return True

    def flush_outbox(self, now: float, report: Optional[CycleReport] = None, job_id: Optional[str] = None) -> List[Tuple[str, str]]:
        """
        Retry pending entries oldest-first within this cycle's attempt budget.

        A metadata entry waits behind earlier metadata of the same job, and a
        dataset waits behind that job's pending bookkeeping calls, so a replica
        is never registered before its dataset.

        Returns:
            List of (entry_id, outcome) with outcome delivered|failed|dropped|blocked|deferred.
        """
        results: List[Tuple[str, str]] = []
        blocked_meta: set = set()
        blocked_book: set = set()
        for entry in self.outbox.entries():
            if job_id is not None and entry.job_id != job_id:
                continue
            waiting = (entry.kind == KIND_METADATA and entry.job_id in blocked_meta) or (
                entry.kind == KIND_DATASET and entry.job_id in blocked_book
            )
            if waiting or not self._take_budget():
                outcome = "blocked" if waiting else "deferred"
            else:
                outcome = self._deliver(entry, now)
                if outcome in ("delivered", "dropped"):
                    self.outbox.remove(entry)
                else:
                    entry.attempts += 1
                    self.outbox.update(entry)
            if outcome not in ("delivered", "dropped") and entry.kind == KIND_METADATA:
                blocked_meta.add(entry.job_id)
                if entry.destination == "bookkeeping":
                    blocked_book.add(entry.job_id)
            results.append((entry.entry_id, outcome))
            if report is not None and outcome in ("delivered", "dropped", "failed"):
                report.add(f"outbox_{outcome}", entry.entry_id, entry.lfn or entry.destination)
        self._complete_ready(now, report)
        return results

    def _deliver(self, entry: OutboxEntry, now: float) -> str:
        if entry.kind == KIND_METADATA:
            try:
                getattr(self.clients, entry.destination).rpc.call(entry.payload["method"], *entry.payload["args"])
            except ServiceUnreachable:
                return "failed"
            except PullGridError as exc:
                logger.warning(f"{self.site_id}: dropping {entry.entry_id} ({entry.payload['method']}): {exc}")
                return "dropped"
            return "delivered"

        if not entry.payload.get("transferred"):
            result = self.sim.wan_transfer(self.site_id, entry.destination, entry.local_path)
            copy = self.sim.se_lookup(entry.destination, entry.local_path) if result.ok else None
            if copy is None or copy.checksum != entry.payload["checksum"]:
                logger.warning(f"{self.site_id}: transfer of {entry.local_path} to {entry.destination} failed")
                return "failed"
            entry.payload["transferred"] = True
            self.outbox.update(entry)
            self.sim.record(self.site_id, "verified", f"{entry.local_path} at {entry.destination}")
        if entry.kind == KIND_LOG:
            return "delivered"

        replica = Replica(
            lfn=entry.lfn,
            storage_element=entry.destination,
            url=f"se://{entry.destination}{entry.lfn}",
            registered_at=now,
            checksum=entry.payload["checksum"],
        )
        try:
            self.clients.bookkeeping.add_replica(replica)
        except (ServiceUnreachable, UnknownLfn) as exc:
            logger.warning(f"{self.site_id}: replica of {entry.lfn} not registered yet: {exc}")
            return "failed"
        except (RejectedDataset, ChecksumMismatch) as exc:
            logger.error(f"{self.site_id}: giving up on {entry.lfn}: {exc}")
            self._settle(entry)
            return "dropped"
        self.sim.record(self.site_id, "replica", f"{entry.lfn} at {entry.destination}")
        self._settle(entry)
        self.sim.remove_local(self.site_id, entry.local_path)
        return "delivered"

    def _settle(self, entry: OutboxEntry) -> None:
        tracked = self.jobs.get(entry.job_id)
        if tracked is not None and entry.lfn in tracked.pending_lfns:
            tracked.pending_lfns.remove(entry.lfn)
            self._save_state()

    # ------------------------------------------------------------------ #
    # Reporting and relay
    # ------------------------------------------------------------------ #
    def _spool(self, job_id: str, service: str, method: str, args: List[Any], now: float) -> None:
        self.outbox.add(KIND_METADATA, method, service, job_id, now, payload={"method": method, "args": args})

    def forward(self, job_id: str, service: str, method: str, args: List[Any], now: float) -> str:
        """
        Send a service call on behalf of a job, spooling it if it cannot be sent now.

        Returns:
            str: sent, spooled or rejected.
        """
        if self.outbox.has_pending_metadata(job_id):
            # Keep per-job order behind what is already spooled
            self._spool(job_id, service, method, args, now)
            return "spooled"
        try:
            getattr(self.clients, service).rpc.call(method, *args)
        except ServiceUnreachable as exc:
            logger.warning(f"{self.site_id}: {service} unreachable, spooling {method} for {job_id}: {exc}")
            self._spool(job_id, service, method, args, now)
            return "spooled"
        except IllegalState as exc:
            logger.info(f"{self.site_id}: {method} for {job_id} not applicable: {exc}")
            return "rejected"
        except PullGridError as exc:
            logger.warning(f"{self.site_id}: {service}.{method} for {job_id} rejected: {exc}")
            return "rejected"
        return "sent"

    def _report(
        self,
        job_id: str,
        state: JobState,
        now: float,
        note: str = "",
        step_index: Optional[int] = None,
        cpu_seconds: float = 0.0,
        route: str = "direct",
    ) -> str:
        msg = StatusMessage(
            job_id=job_id,
            reported_state=state,
            site_id=self.site_id,
            timestamp=now,
            note=note,
            step_index=step_index,
            cpu_seconds=cpu_seconds,
            route=route,
        )
        return self.forward(job_id, "monitoring", "reportStatus", [status_to_struct(msg)], now)

    def relay(self, msg: StatusMessage) -> str:
        """Forward a worker-node message to monitoring, keeping its original timestamp."""
        msg = replace(msg, route="relay")
        result = self.forward(msg.job_id, "monitoring", "reportStatus", [status_to_struct(msg)], msg.timestamp)
        return "forwarded" if result == "sent" else result

    def worker_send(self, msg: StatusMessage, wn_connectivity: bool) -> str:
        """Deliver a message produced on a worker node, directly if it can reach the service."""
        if wn_connectivity and not self.config.relay and not self.outbox.has_pending_metadata(msg.job_id):
            try:
                self.clients.monitoring.report_status(replace(msg, route="direct"))
                return "direct"
            except ServiceUnreachable:
                logger.warning(f"{msg.site_id}: worker node cannot reach monitoring, relaying {msg.job_id}")
            except PullGridError as exc:
                logger.warning(f"{msg.site_id}: monitoring rejected {msg.job_id}: {exc}")
                return "rejected"
        return self.relay(msg)

    def on_worker_event(self, kind: str, batch_job: BatchJob, index: Optional[int], sim_time: float) -> None:
        """Worker hook: the wrapper announces the start of each workflow step."""
        if kind != "step":
            return
        tracked = self.jobs.get(batch_job.label)
        if tracked is None:
            return
        step = tracked.job.resolved_steps[index]
        msg = StatusMessage(
            job_id=tracked.job_id,
            reported_state=JobState.RUNNING,
            site_id=self.site_id,
            timestamp=sim_time + self.epoch,
            note=f"step {index} started: {step.application} {step.app_version}",
            step_index=index,
        )
        self.worker_send(msg, self.sim.site(self.site_id).wn_outbound_connectivity)


def open_site_batch(config: AgentConfig, site: SiteConfig, clock: Callable[[], float] = time.time) -> Tuple[SiteSimulator, float]:
    """
    The site's batch system as the previous invocation left it, or a fresh one.

    Returns:
        The simulator and the epoch its simulated time is offset by.

    Raises:
        IoFailure: The saved batch system cannot be read.
    """
    sim = SiteSimulator([site])
    path = config.path(BATCH_NAME)
    if not path.exists():
        return sim, clock()
    try:
        saved = json.loads(path.read_text(encoding="utf-8"))
        sim.restore(saved["batch"])
        return sim, float(saved["epoch"])
    except (ValueError, KeyError, TypeError, PullGridError) as exc:
        raise IoFailure(f"unreadable batch system {path}: {exc}")


def run_agent_loop(
    agent: ProductionAgent,
    once: bool = False,
    clock: Callable[[], float] = time.time,
    sleep: Callable[[float], None] = time.sleep,
    max_cycles: Optional[int] = None,
    after_cycle: Optional[Callable[[ProductionAgent], None]] = None,
) -> List[CycleReport]:
    """
    Drive an agent against wall-clock time: advance the simulated batch system
    to now, run one cycle, sleep poll_interval. ``once`` gives cron behaviour.
    """
    reports = []
    while True:
        now = clock()
        try:
            agent.sim.advance(max(agent.sim.clock.now, now - agent.epoch))
            reports.append(agent.run_cycle(now))
            if after_cycle is not None:
                after_cycle(agent)
        except Exception:
            logger.error(traceback.format_exc())
        if once or (max_cycles is not None and len(reports) >= max_cycles):
            return reports
        sleep(agent.config.poll_interval)
