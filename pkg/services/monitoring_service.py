"""
monitoring_service.py
Receives job progress messages from agents and worker nodes, keeps the job
history, and summarizes activity per site.
"""

import logging
from dataclasses import replace
from typing import Any, Dict, List

from components.model import StatusMessage, validate_transition
from services.job_table import (
    append_history,
    apply_transition,
    load_history,
    load_record,
    save_record,
    site_stats,
)
from services.store import StoreHandle, Transaction

logger = logging.getLogger("monitoring_service")

FLAG_ILLEGAL = "illegal_transition"
FLAG_OUT_OF_ORDER = "out_of_order"
FLAG_STALE_ATTEMPT = "stale_attempt"


class MonitoringService:
    def __init__(self, store: StoreHandle):
        self.store = store

    def report_status(self, msg: StatusMessage) -> bool:
        """
        Record a status message.

        Messages are idempotent on (job_id, attempt, state, timestamp, step).
        A message repeating the current state is progress and is stored as-is.
        Late, illegal or stale-attempt messages are stored with a flag and
        leave the job state untouched.
        """

        def work(tx: Transaction) -> List[str]:
            record = load_record(tx, msg.job_id)
            incoming = msg if msg.attempt is not None else replace(msg, attempt=record.attempt)
            history = load_history(tx, msg.job_id)
            key = incoming.dedup_key()
            if any(entry.dedup_key() == key for entry in history):
                return ["duplicate"]

            flags: List[str] = []
            same_attempt = [entry.timestamp for entry in history if entry.attempt == incoming.attempt]
            if incoming.attempt != record.attempt:
                flags.append(FLAG_STALE_ATTEMPT)
            elif same_attempt and incoming.timestamp < max(same_attempt):
                flags.append(FLAG_OUT_OF_ORDER)
            elif incoming.reported_state == record.state:
                pass
            elif validate_transition(record.state, incoming.reported_state):
                apply_transition(tx, record, replace(incoming, flags=()))
                return []
            else:
                flags.append(FLAG_ILLEGAL)

            append_history(tx, record, replace(incoming, flags=tuple(flags)))
            save_record(tx, record)
            return flags

        flags = self.store.transact(work)
        if flags and flags != ["duplicate"]:
            logger.warning(f"Stored {msg.reported_state.value} for {msg.job_id} flagged {','.join(flags)}")
        return True

    def job_history(self, job_id: str) -> List[StatusMessage]:
        def work(tx: Transaction) -> List[StatusMessage]:
            load_record(tx, job_id)
            return load_history(tx, job_id)

        return self.store.transact(work)

    def site_summary(self) -> Dict[str, Dict[str, Any]]:
        """
        Per-site counters and CPU share.

        cpu_share is the site's CPU time consumed by Done jobs over the total
        of all sites; all shares are 0 before any job finishes.
        """
        stats = self.store.transact(site_stats)
        total = sum(entry["cpu_seconds"] for entry in stats.values())
        summary = {}
        for site in sorted(stats):
            entry = stats[site]
            summary[site] = {
                "queued": int(entry["queued"]),
                "running": int(entry["running"]),
                "done": int(entry["done"]),
                "failed": int(entry["failed"]),
                "cpu_seconds": float(entry["cpu_seconds"]),
                "cpu_share": entry["cpu_seconds"] / total if total > 0 else 0.0,
            }
        return summary

    def route_counts(self, job_id: str) -> Dict[str, int]:
        """How many stored messages of a job arrived per route."""
        counts: Dict[str, int] = {}
        for entry in self.job_history(job_id):
            counts[entry.route] = counts.get(entry.route, 0) + 1
        return counts
