"""
portal.py
Portal mode: one agent fronting a sub-grid. Jobs it pulls are shipped, with
an agent bootstrap, to a worker node of an inner site, where a one-shot
nested agent runs the usual lifecycle on that node.
"""

import logging
from typing import Any, Dict, List, Optional

from components.exceptions import (
    BatchSubmissionFailed,
    ChecksumMismatch,
    InsufficientDisk,
    MalformedDocument,
    NoInnerResources,
    NotInstalled,
    PullGridError,
    ServiceUnreachable,
    UnknownPackage,
)
from components.model import DatasetDescription, JobDescriptor, JobState, Replica, StatusMessage, output_datasets
from components.protocol import dataset_to_xml, job_to_xml, replica_to_struct, status_to_struct
from components.site_simulator import OUTCOME_SUCCESS, BatchJob, SiteSimulator
from services.agent_service import (
    CAUSE_SITE,
    CAUSE_SOFTWARE,
    CAUSE_SUBMISSION,
    CAUSE_TRANSFER,
    CycleReport,
    ProductionAgent,
    TrackedJob,
)
from services.config import AgentConfig
from services.rpc import ClientBundle
from services.software_repository import InstallArea

logger = logging.getLogger("portal")


def sandbox_script(job_xml: str, portal_site: str) -> str:
    """Input sandbox: the job description plus the script that starts a nested agent on the worker node."""
    return (
        "#!/bin/sh\n"
        f"# pullgrid sandbox from portal {portal_site}\n"
        "cat > job.xml <<'PULLGRID_JOB'\n"
        f"{job_xml}\n"
        "PULLGRID_JOB\n"
        "pullgrid-agent --nested --job job.xml\n"
    )


class NestedAgent:
    """
    The agent running inside one portal job. It lives only as long as its
    worker-node job and is driven by the inner site's batch events.
    """

    def __init__(self, portal: "PortalAgent", job: JobDescriptor, site_id: str, batch_id: str):
        self.portal = portal
        self.job = job
        self.site_id = site_id
        self.batch_id = batch_id
        self.started = False
        self.finished = False
        self.failure_cause: Optional[str] = None

    @property
    def sim(self) -> SiteSimulator:
        return self.portal.sim

    def _now(self) -> float:
        return self.sim.clock.now + self.portal.epoch

    def _send(self, service: str, method: str, args: List[Any]) -> str:
        connected = self.sim.site(self.site_id).wn_outbound_connectivity
        if connected and not self.portal.config.relay and not self.portal.outbox.has_pending_metadata(self.job.job_id):
            try:
                getattr(self.portal.clients, service).rpc.call(method, *args)
                return "direct"
            except ServiceUnreachable:
                logger.warning(f"{self.site_id}: {service} unreachable from worker node, using portal")
            except PullGridError as exc:
                logger.warning(f"{self.site_id}: {service}.{method} for {self.job.job_id} rejected: {exc}")
                return "rejected"
        # Through the portal agent, which spools when it cannot deliver
        return self.portal.forward(self.job.job_id, service, method, args, self._now())

    def _status(self, state: JobState, note: str = "", step_index: Optional[int] = None, cpu_seconds: float = 0.0) -> None:
        connected = self.sim.site(self.site_id).wn_outbound_connectivity and not self.portal.config.relay
        msg = StatusMessage(
            job_id=self.job.job_id,
            reported_state=state,
            site_id=self.portal.site_id,
            timestamp=self._now(),
            note=note,
            step_index=step_index,
            cpu_seconds=cpu_seconds,
            route="direct" if connected else "relay",
        )
        self._send("monitoring", "reportStatus", [status_to_struct(msg)])

    def _fail(self, cause: str, detail: str) -> None:
        logger.warning(f"{self.site_id}: nested job {self.job.job_id} failed ({cause}): {detail}")
        self._status(JobState.FAILED, note=f"{cause}: {detail}")
        self.failure_cause = cause
        self.finished = True

    def _area(self) -> InstallArea:
        inner = self.sim.site(self.site_id)
        base = self.portal.config.path("inner") / self.site_id
        if inner.shared_area_writable:
            return InstallArea(base / "software", quota_mb=inner.disk_quota_mb)
        return InstallArea(base / "jobs" / self.job.job_id / "software", quota_mb=inner.disk_quota_mb)

    def start(self) -> None:
        self.started = True
        self._status(JobState.INSTALLING, note=f"nested agent on {self.site_id}")
        try:
            area = self._area()
            for app, version in self.job.requirements.software:
                if not area.is_installed(app, version):
                    area.install(self.portal.clients.software, app, version)
        except (UnknownPackage, ServiceUnreachable, ChecksumMismatch, MalformedDocument, NotInstalled) as exc:
            self._fail(CAUSE_SOFTWARE, str(exc))
            return
        except InsufficientDisk as exc:
            self._fail(CAUSE_SITE, str(exc))
            return
        self._status(JobState.SUBMITTED, note=f"worker node job {self.batch_id}")

    def on_event(self, kind: str, batch_job: BatchJob, index: Optional[int]) -> None:
        if self.finished:
            return
        if kind == "step":
            if not self.started:
                self.start()
                if self.finished:
                    return
            step = self.job.resolved_steps[index]
            self._status(JobState.RUNNING, note=f"step {index} started: {step.application} {step.app_version}", step_index=index)
        elif kind == "finish":
            self.finish(batch_job)

    def finish(self, batch_job: BatchJob) -> None:
        if batch_job.outcome != OUTCOME_SUCCESS:
            self._fail(batch_job.outcome, f"worker node job {batch_job.batch_id} ended with {batch_job.outcome}")
            return
        self._status(JobState.TRANSFERRING, note=f"{len(batch_job.outputs)} files to transfer")
        specs = {spec.lfn: spec for spec in output_datasets(self.job)}
        config = self.portal.config
        for produced in batch_job.outputs:
            spec = specs.get(produced.name)
            destination = config.storage_element if spec else config.log_storage_element
            if spec is not None:
                dataset = DatasetDescription(
                    lfn=spec.lfn,
                    data_type=spec.data_type,
                    job_id=self.job.job_id,
                    run_id=self.job.run_id,
                    events=self.job.events,
                    size_bytes=produced.size_bytes,
                    checksum=produced.checksum,
                )
                for _ in range(config.registration_sends):
                    self._send("bookkeeping", "registerDataset", [dataset_to_xml(dataset).decode("utf-8")])
            # No outbox on a worker node: retry within the job
            delivered = False
            for _ in range(config.max_transfer_attempts_per_cycle):
                result = self.sim.wan_transfer(self.site_id, destination, produced.name)
                copy = self.sim.se_lookup(destination, produced.name) if result.ok else None
                if copy is not None and copy.checksum == produced.checksum:
                    delivered = True
                    break
            if not delivered:
                self._fail(CAUSE_TRANSFER, f"{produced.name} could not be delivered to {destination}")
                return
            self.sim.record(self.site_id, "verified", f"{produced.name} at {destination}")
            if spec is not None:
                replica = Replica(spec.lfn, destination, f"se://{destination}{spec.lfn}", self._now(), produced.checksum)
                self._send("bookkeeping", "addReplica", [replica_to_struct(replica)])
                self.sim.record(self.site_id, "replica", f"{spec.lfn} at {destination}")
            self.sim.remove_local(self.site_id, produced.name)
        self._status(JobState.DONE, note="all datasets replicated", cpu_seconds=batch_job.cpu_seconds)
        self.finished = True


class PortalAgent(ProductionAgent):
    """
    Agent of a portal site. Its batch capacity is the sum of its inner sites;
    it never runs payloads itself.
    """

    def __init__(self, config: AgentConfig, clients: ClientBundle, sim: SiteSimulator, epoch: float = 0.0):
        self.nested: Dict[str, NestedAgent] = {}
        super().__init__(config, clients, sim, epoch)

    @property
    def inner_sites(self) -> List[str]:
        return list(self.sim.site(self.site_id).inner_sites)

    def _attach_hooks(self) -> None:
        for inner in self.inner_sites:
            self.sim.set_worker_hook(inner, self._on_inner_event)

    def batch_state(self) -> Dict[str, Any]:
        state: Dict[str, Any] = {"queued": 0, "running": 0, "slot_count": 0, "jobs": {}}
        for inner in self.inner_sites:
            status = self.sim.batch_status(inner)
            for key in ("queued", "running", "slot_count"):
                state[key] += status[key]
            state["jobs"].update(status["jobs"])
        return state

    def _cpu_power(self) -> float:
        inner = self.inner_sites
        if not inner:
            return self.sim.site(self.site_id).cpu_power
        return max(self.sim.site(site).cpu_power for site in inner)

    def portal_submit(self, job: JobDescriptor) -> str:
        """
        Ship a job sandbox to the least-loaded inner site.

        Raises:
            NoInnerResources, BatchSubmissionFailed
        """
        inner = self.inner_sites
        if not inner:
            raise NoInnerResources(f"portal {self.site_id} has no inner sites")

        def load(site_id: str):
            status = self.sim.batch_status(site_id)
            return ((status["queued"] + status["running"]) / status["slot_count"], site_id)

        target = min(inner, key=load)
        job_xml = job_to_xml(job).decode("utf-8")
        batch_id = self.sim.batch_submit(
            target,
            sandbox_script(job_xml, self.site_id),
            job.nominal_runtime,
            label=job.job_id,
            steps=len(job.resolved_steps),
            outputs=self.job_outputs(job),
        )
        self.nested[batch_id] = NestedAgent(self, job, target, batch_id)
        logger.info(f"Portal {self.site_id} sent {job.job_id} to {target} as {batch_id}")
        return batch_id

    def start_job(self, job: JobDescriptor, now: float, report: CycleReport) -> bool:
        tracked = TrackedJob(job.job_id, job_to_xml(job).decode("utf-8"))
        self.jobs[job.job_id] = tracked
        try:
            grid_id = self.portal_submit(job)
        except (NoInnerResources, BatchSubmissionFailed) as exc:
            self._fail(job.job_id, CAUSE_SUBMISSION, str(exc), now, report)
            return False
        tracked.phase = "delegated"
        tracked.batch_id = grid_id
        self._save_state()
        report.add("delegated", job.job_id, grid_id)
        return True

    def finalize_completed(self, now: float, report: CycleReport) -> None:
        for job_id in sorted(self.jobs):
            tracked = self.jobs[job_id]
            if tracked.phase != "delegated":
                continue
            nested = self.nested.get(tracked.batch_id)
            if nested is None:
                # Nested agents do not survive a portal restart
                self._fail(job_id, CAUSE_SITE, f"lost track of worker node job {tracked.batch_id}", now, report)
                continue
            if not nested.finished:
                continue
            del self.jobs[job_id]
            del self.nested[tracked.batch_id]
            self.sim.forget(tracked.batch_id)
            self._save_state()
            if nested.failure_cause is None:
                report.add("done", job_id)
                continue
            report.add("failed", job_id, nested.failure_cause)
            if nested.failure_cause in self.config.reschedule_causes:
                self.forward(job_id, "production", "rescheduleJob", [job_id, nested.failure_cause], now)
                report.add("reschedule", job_id, nested.failure_cause)
        super().finalize_completed(now, report)

    def _on_inner_event(self, kind: str, batch_job: BatchJob, index: Optional[int], sim_time: float) -> None:
        nested = self.nested.get(batch_job.batch_id)
        if nested is not None:
            nested.on_event(kind, batch_job, index)
