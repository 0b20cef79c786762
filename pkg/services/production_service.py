"""
production_service.py
The production service: owns workflow, run and job records, serves jobs to
pulling agents one at a time, and reschedules failed jobs.
"""

import logging
import time
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Tuple

from components.exceptions import (
    DuplicateId,
    IllegalState,
    InvalidParameters,
    InvalidPipeline,
    UnknownWorkflow,
)
from components.model import (
    JobDescriptor,
    JobRecord,
    JobRequirements,
    JobState,
    OptionPairs,
    ProductionRun,
    ResourceCapability,
    StatusMessage,
    WorkflowDefinition,
    check_pipeline,
    match_job,
    split_run,
)
from services.config import ServiceConfig
from services.job_table import (
    append_history,
    apply_transition,
    load_history,
    load_job,
    load_record,
    load_run,
    save_record,
)
from services.store import StoreHandle, Transaction

logger = logging.getLogger("production_service")

RESCHEDULABLE_STATES = (JobState.ASSIGNED, JobState.INSTALLING, JobState.SUBMITTED)


class ProductionService:
    """
    Central job queue of the production system.

    All state lives in the store; every public method is one transaction, so
    concurrent callers (one RPC thread each) never observe a half-applied change.
    """

    def __init__(self, store: StoreHandle, config: Optional[ServiceConfig] = None, clock: Callable[[], float] = time.time):
        """
        Args:
            store: The shared production database.
            config: Service configuration; defaults are used when omitted.
            clock: Source of timestamps for service-side history entries.
        """
        self.store = store
        self.config = config or ServiceConfig(store_path=None)
        self.clock = clock

    # ------------------------------------------------------------------ #
    # Workflows
    # ------------------------------------------------------------------ #
    def define_workflow(self, workflow: WorkflowDefinition) -> str:
        """
        Store a workflow definition immutably.

        Redefining an existing name creates a new id with the next version.

        Returns:
            str: The id of the stored definition.
        """
        bad = check_pipeline(workflow.steps)
        if bad is not None:
            raise InvalidPipeline(bad)
        now = self.clock()

        def work(tx: Transaction) -> str:
            if workflow.workflow_id and tx.exists("workflows", workflow.workflow_id):
                raise DuplicateId(f"workflow id '{workflow.workflow_id}' already exists")
            versions = tx.get("workflow_names", workflow.name, [])
            workflow_id = workflow.workflow_id or f"wf-{tx.next_id('workflow'):06d}"
            stored = replace(workflow, workflow_id=workflow_id, version=len(versions) + 1, created_at=now)
            tx.put("workflows", workflow_id, stored.to_record())
            tx.put("workflow_names", workflow.name, versions + [workflow_id])
            return workflow_id

        workflow_id = self.store.transact(work)
        logger.info(f"Defined workflow {workflow.name} as {workflow_id}")
        return workflow_id

    def get_workflow(self, workflow_id: str) -> WorkflowDefinition:
        def work(tx: Transaction) -> WorkflowDefinition:
            rec = tx.get("workflows", workflow_id)
            if rec is None:
                raise UnknownWorkflow(f"no workflow '{workflow_id}'")
            return WorkflowDefinition.from_record(rec)

        return self.store.transact(work)

    def list_workflows(self) -> List[WorkflowDefinition]:
        return self.store.transact(
            lambda tx: [WorkflowDefinition.from_record(rec) for _, rec in tx.scan("workflows")]
        )

    # ------------------------------------------------------------------ #
    # Runs
    # ------------------------------------------------------------------ #
    def create_run(
        self,
        workflow_id: str,
        total_events: int,
        events_per_job: int,
        extra_options: OptionPairs = (),
        destination_site: Optional[str] = None,
        min_cpu_power: float = 0.0,
        min_disk_mb: int = 0,
        seconds_per_event: float = 1.0,
        bytes_per_event: int = 1000,
        request_token: Optional[str] = None,
    ) -> Tuple[str, int]:
        """
        Instantiate a workflow as a production run and queue its jobs.

        A repeated call carrying the same ``request_token`` returns the run
        created by the first call instead of creating another one.

        Returns:
            Tuple[str, int]: (run_id, job_count)
        """
        now = self.clock()

        def work(tx: Transaction) -> Tuple[str, int]:
            if request_token:
                known = tx.get("run_tokens", request_token)
                if known is not None:
                    return known["run_id"], known["job_count"]
            wf_rec = tx.get("workflows", workflow_id)
            if wf_rec is None:
                raise UnknownWorkflow(f"no workflow '{workflow_id}'")
            workflow = WorkflowDefinition.from_record(wf_rec)
            run_id = f"run-{tx.next_id('run'):06d}"
            run = ProductionRun(
                run_id=run_id,
                workflow_id=workflow_id,
                total_events=total_events,
                events_per_job=events_per_job,
                extra_options=extra_options,
                destination_site=destination_site,
                created_at=now,
                min_cpu_power=min_cpu_power,
                min_disk_mb=min_disk_mb,
                seconds_per_event=seconds_per_event,
                bytes_per_event=bytes_per_event,
            )
            jobs = split_run(run, workflow)
            first = jobs[0]
            run_rec = run.to_record()
            run_rec.update(
                resolved_steps=[step.to_record() for step in first.resolved_steps],
                requirements=first.requirements.to_record(),
                job_count=len(jobs),
                request_token=request_token,
            )
            tx.put("runs", run_id, run_rec)
            for job in jobs:
                self._queue_job(tx, job, now)
            if request_token:
                tx.put("run_tokens", request_token, {"run_id": run_id, "job_count": len(jobs)})
            return run_id, len(jobs)

        run_id, job_count = self.store.transact(work)
        logger.info(f"Created run {run_id} of workflow {workflow_id}: {job_count} jobs")
        return run_id, job_count

    @staticmethod
    def _queue_job(tx: Transaction, job: JobDescriptor, now: float) -> None:
        tx.put(
            "jobs",
            job.job_id,
            {
                "run_id": job.run_id,
                "sequence_index": job.sequence_index,
                "events": job.events,
                "first_event_offset": job.first_event_offset,
            },
        )
        record = JobRecord(job_id=job.job_id, last_update=now)
        append_history(tx, record, StatusMessage(job.job_id, JobState.CREATED, "", now, note="created", attempt=1, route="service"))
        apply_transition(tx, record, StatusMessage(job.job_id, JobState.WAITING, "", now, note="queued", attempt=1, route="service"))

    def run_status(self, run_id: str) -> Dict[JobState, int]:
        """Count the jobs of a run per state; only states that occur are listed."""

        def work(tx: Transaction) -> Dict[JobState, int]:
            load_run(tx, run_id)
            counts: Dict[JobState, int] = {}
            for _, rec in tx.scan("job_records", run_id + "."):
                state = JobState(rec["state"])
                counts[state] = counts.get(state, 0) + 1
            return counts

        return self.store.transact(work)

    def list_runs(self) -> List[Dict[str, Any]]:
        return self.store.transact(
            lambda tx: [
                {key: rec[key] for key in ("run_id", "workflow_id", "total_events", "events_per_job", "job_count", "destination_site", "created_at")}
                for _, rec in tx.scan("runs")
            ]
        )

    def waiting_count(self) -> int:
        return self.store.transact(lambda tx: tx.count("waiting"))

    def get_job(self, job_id: str) -> Tuple[JobDescriptor, JobRecord]:
        def work(tx: Transaction) -> Tuple[JobDescriptor, JobRecord]:
            record = load_record(tx, job_id)
            record.history = load_history(tx, job_id)
            return load_job(tx, job_id), record

        return self.store.transact(work)

    # ------------------------------------------------------------------ #
    # Serving
    # ------------------------------------------------------------------ #
    def request_job(self, site_id: str, capability: ResourceCapability) -> Optional[JobDescriptor]:
        """
        Serve the oldest Waiting job the requesting resource can run.

        Matching only walks the Waiting set, in (run_id, sequence_index) order.
        The Waiting -> Assigned claim happens in the same transaction as the
        selection, so a job is never handed to two requesters.

        Returns:
            Optional[JobDescriptor]: The claimed job, or None when nothing matches.
        """
        if site_id != capability.site_id:
            raise InvalidParameters(f"capability describes site '{capability.site_id}', not '{site_id}'")
        now = self.clock()

        def work(tx: Transaction) -> Optional[JobDescriptor]:
            requirements: Dict[str, JobRequirements] = {}
            for job_id, entry in tx.scan("waiting"):
                if site_id in entry.get("excluded_sites", []):
                    continue
                run_id = entry["run_id"]
                if run_id not in requirements:
                    requirements[run_id] = JobRequirements.from_record(load_run(tx, run_id)["requirements"])
                if not match_job(requirements[run_id], capability):
                    continue
                record = load_record(tx, job_id)
                record.site = site_id
                msg = StatusMessage(job_id, JobState.ASSIGNED, site_id, now, note=f"served to {site_id}", attempt=record.attempt, route="service")
                apply_transition(tx, record, msg)
                return load_job(tx, job_id)
            return None

        job = self.store.transact(work)
        if job is not None:
            logger.info(f"Served {job.job_id} to {site_id}")
        return job

    def reschedule(self, job_id: str, reason: str) -> JobState:
        """
        Put a failed job back in the Waiting set if it has attempts left.

        A job still in Assigned/Installing/Submitted is first recorded as
        Failed: the agent declared that it could not start it. Site-local
        reasons exclude the failing site from serving this job again.

        Returns:
            JobState: The job's state after the call.
        """
        now = self.clock()

        def work(tx: Transaction) -> JobState:
            record = load_record(tx, job_id)
            if record.state in RESCHEDULABLE_STATES:
                apply_transition(tx, record, StatusMessage(job_id, JobState.FAILED, record.site or "", now, note=reason, attempt=record.attempt, route="service"))
            elif record.state != JobState.FAILED:
                raise IllegalState(f"job {job_id} is {record.state.value}; only failed jobs are rescheduled")
            if reason in self.config.site_exclusion_reasons and record.site and record.site not in record.excluded_sites:
                record.excluded_sites.append(record.site)
            if record.attempt < self.config.max_reschedules:
                record.attempt += 1
                msg = StatusMessage(job_id, JobState.WAITING, "", now, note=f"rescheduled: {reason}", attempt=record.attempt, route="service")
                apply_transition(tx, record, msg, rescheduling=True)
            else:
                append_history(tx, record, StatusMessage(job_id, JobState.FAILED, "", now, note=f"attempts exhausted: {reason}", attempt=record.attempt, route="service"))
                save_record(tx, record)
            return record.state

        state = self.store.transact(work)
        logger.info(f"Reschedule of {job_id} ({reason}) -> {state.value}")
        return state
