"""
job_table.py
Job-record plumbing shared by the production and monitoring services.

Tables used (all inside the production database):
  runs         run_id -> run record + resolved steps, requirements and job count
  jobs         job_id -> {run_id, sequence_index, events, first_event_offset}
  job_records  job_id -> JobRecord (without history)
  job_history  job_id -> list of StatusMessage records, insertion ordered
  waiting      job_id -> {run_id, excluded_sites}; the Waiting set, FIFO by key
  site_stats   site_id -> {queued, running, done, failed, cpu_seconds}
"""

import logging
from typing import Any, Dict, List, Optional

from components.exceptions import IllegalState, UnknownJob, UnknownRun
from components.model import (
    JobDescriptor,
    JobRecord,
    JobRequirements,
    JobState,
    StatusMessage,
    StepDefinition,
    validate_transition,
)
from services.store import Transaction

logger = logging.getLogger("job_table")

QUEUED_STATES = (JobState.ASSIGNED, JobState.INSTALLING, JobState.SUBMITTED)
EMPTY_STATS = {"queued": 0, "running": 0, "done": 0, "failed": 0, "cpu_seconds": 0.0}


def load_run(tx: Transaction, run_id: str) -> Dict[str, Any]:
    run = tx.get("runs", run_id)
    if run is None:
        raise UnknownRun(f"no run '{run_id}'")
    return run


def load_record(tx: Transaction, job_id: str) -> JobRecord:
    rec = tx.get("job_records", job_id)
    if rec is None:
        raise UnknownJob(f"no job '{job_id}'")
    return JobRecord.from_record(rec)


def load_history(tx: Transaction, job_id: str) -> List[StatusMessage]:
    return [StatusMessage.from_record(h) for h in tx.get("job_history", job_id, [])]


def load_job(tx: Transaction, job_id: str) -> JobDescriptor:
    """Rebuild the descriptor of a job from its row and its run."""
    row = tx.get("jobs", job_id)
    if row is None:
        raise UnknownJob(f"no job '{job_id}'")
    run = load_run(tx, row["run_id"])
    return JobDescriptor(
        job_id=job_id,
        run_id=row["run_id"],
        sequence_index=row["sequence_index"],
        events=row["events"],
        resolved_steps=tuple(StepDefinition.from_record(s) for s in run["resolved_steps"]),
        requirements=JobRequirements.from_record(run["requirements"]),
        first_event_offset=row["first_event_offset"],
        seconds_per_event=run["seconds_per_event"],
        bytes_per_event=run["bytes_per_event"],
    )


def save_record(tx: Transaction, record: JobRecord) -> None:
    tx.put("job_records", record.job_id, record.to_record())


def append_history(tx: Transaction, record: JobRecord, msg: StatusMessage) -> None:
    history = tx.get("job_history", record.job_id, [])
    history.append(msg.to_record())
    tx.put("job_history", record.job_id, history)
    record.last_update = max(record.last_update, msg.timestamp)


def _bump(tx: Transaction, site: Optional[str], field: str, delta: float) -> None:
    if not site:
        return
    stats = tx.get("site_stats", site) or dict(EMPTY_STATS)
    stats[field] = stats.get(field, 0) + delta
    tx.put("site_stats", site, stats)


def _account(tx: Transaction, site: Optional[str], old: JobState, new: JobState, cpu_seconds: float) -> None:
    if (old in QUEUED_STATES) != (new in QUEUED_STATES):
        _bump(tx, site, "queued", 1 if new in QUEUED_STATES else -1)
    if (old == JobState.RUNNING) != (new == JobState.RUNNING):
        _bump(tx, site, "running", 1 if new == JobState.RUNNING else -1)
    if new == JobState.DONE:
        _bump(tx, site, "done", 1)
        _bump(tx, site, "cpu_seconds", float(cpu_seconds))
    elif new == JobState.FAILED:
        _bump(tx, site, "failed", 1)


def apply_transition(tx: Transaction, record: JobRecord, msg: StatusMessage, rescheduling: bool = False) -> None:
    """Move ``record`` to ``msg.reported_state``, keeping history, the Waiting set and site counters in step."""
    old, new = record.state, msg.reported_state
    if not validate_transition(old, new, rescheduling):
        raise IllegalState(f"job {record.job_id}: {old.value} -> {new.value} is not a legal transition")
    _account(tx, record.site, old, new, msg.cpu_seconds)
    record.state = new
    append_history(tx, record, msg)
    if new == JobState.WAITING:
        run_id = tx.get("jobs", record.job_id)["run_id"]
        tx.put("waiting", record.job_id, {"run_id": run_id, "excluded_sites": list(record.excluded_sites)})
    elif old == JobState.WAITING:
        tx.delete("waiting", record.job_id)
    save_record(tx, record)
    logger.debug(f"{record.job_id}: {old.value} -> {new.value} (attempt {record.attempt})")


def site_stats(tx: Transaction) -> Dict[str, Dict[str, Any]]:
    return {site: dict(EMPTY_STATS, **stats) for site, stats in tx.scan("site_stats")}
