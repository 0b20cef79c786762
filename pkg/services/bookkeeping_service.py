"""
bookkeeping_service.py
Dataset metadata catalog: a pending cache checked by the production manager,
the approved/rejected catalog, and the replica registry.
"""

import logging
from typing import Any, Dict, Iterable, List, Optional, Tuple

from components.exceptions import (
    ChecksumMismatch,
    InvalidParameters,
    LfnConflict,
    NotPending,
    RejectedDataset,
    UnknownLfn,
)
from components.model import DatasetDescription, DatasetStatus, Replica
from components.protocol import dataset_from_xml
from services.store import StoreHandle, Transaction

logger = logging.getLogger("bookkeeping_service")

QUERY_KEYS = ("run_id", "data_type", "status", "min_events")


def _replica_key(lfn: str, storage_element: str) -> str:
    return f"{lfn}|{storage_element}"


class BookkeepingService:
    def __init__(self, store: StoreHandle, auto_approve: bool = False):
        """
        Args:
            store: The shared production database.
            auto_approve: Skip the manual check; registrations go straight to the catalog.
        """
        self.store = store
        self.auto_approve = auto_approve

    @staticmethod
    def _lookup(tx: Transaction, lfn: str) -> Optional[DatasetDescription]:
        rec = tx.get("datasets_pending", lfn)
        if rec is None:
            rec = tx.get("datasets_catalog", lfn)
        return None if rec is None else DatasetDescription.from_record(rec)

    def _register(self, tx: Transaction, dataset: DatasetDescription) -> bool:
        if "|" in dataset.lfn:
            raise InvalidParameters(f"lfn '{dataset.lfn}' contains '|'")
        existing = self._lookup(tx, dataset.lfn)
        if existing is not None:
            if existing.content_key() != dataset.content_key():
                raise LfnConflict(f"lfn '{dataset.lfn}' already registered with different content")
            return False
        if self.auto_approve:
            tx.put("datasets_catalog", dataset.lfn, dataset.with_status(DatasetStatus.APPROVED).to_record())
        else:
            tx.put("datasets_pending", dataset.lfn, dataset.with_status(DatasetStatus.PENDING).to_record())
        return True

    def register_dataset(self, xml: bytes) -> bool:
        """Cache a dataset description for approval. Re-registering identical content is a no-op."""
        dataset = dataset_from_xml(xml)
        created = self.store.transact(lambda tx: self._register(tx, dataset))
        if created:
            logger.info(f"Registered dataset {dataset.lfn}")
        return True

    def register_datasets(self, documents: Iterable[bytes]) -> int:
        """Bulk registration in one transaction; returns how many entries were new."""
        datasets = [dataset_from_xml(doc) for doc in documents]
        created = self.store.transact(lambda tx: sum(1 for d in datasets if self._register(tx, d)))
        logger.info(f"Bulk registration: {created} new of {len(datasets)}")
        return created

    def _decide(self, lfns: List[str], status: DatasetStatus, reason: str) -> List[Dict[str, str]]:
        # All-or-nothing: one unknown or already-decided lfn fails the whole batch.
        def work(tx: Transaction) -> List[Dict[str, str]]:
            results = []
            for lfn in lfns:
                rec = tx.get("datasets_pending", lfn)
                if rec is None:
                    if tx.exists("datasets_catalog", lfn):
                        raise NotPending(f"dataset '{lfn}' is not pending")
                    raise UnknownLfn(f"no dataset '{lfn}'")
                dataset = DatasetDescription.from_record(rec).with_status(status, reason)
                tx.delete("datasets_pending", lfn)
                tx.put("datasets_catalog", lfn, dataset.to_record())
                if status == DatasetStatus.REJECTED:
                    # A rejected dataset keeps no replicas
                    for key in [key for key, _ in tx.scan("replicas", prefix=_replica_key(lfn, ""))]:
                        tx.delete("replicas", key)
                results.append({"lfn": lfn, "status": status.value})
            return results

        return self.store.transact(work)

    def approve(self, lfns: List[str]) -> List[Dict[str, str]]:
        results = self._decide(list(lfns), DatasetStatus.APPROVED, "")
        logger.info(f"Approved {len(results)} datasets")
        return results

    def reject(self, lfns: List[str], reason: str) -> List[Dict[str, str]]:
        results = self._decide(list(lfns), DatasetStatus.REJECTED, reason)
        logger.info(f"Rejected {len(results)} datasets: {reason}")
        return results

    def add_replica(self, replica: Replica) -> bool:
        """Register a physical copy. Only called once the copy has been verified at its storage element."""

        def work(tx: Transaction) -> bool:
            dataset = self._lookup(tx, replica.lfn)
            if dataset is None:
                raise UnknownLfn(f"no dataset '{replica.lfn}'")
            if dataset.status == DatasetStatus.REJECTED:
                raise RejectedDataset(f"dataset '{replica.lfn}' was rejected: {dataset.reason}")
            if replica.checksum != dataset.checksum:
                raise ChecksumMismatch(
                    f"replica of '{replica.lfn}' at {replica.storage_element} has checksum "
                    f"{replica.checksum:08x}, expected {dataset.checksum:08x}"
                )
            key = _replica_key(replica.lfn, replica.storage_element)
            if tx.exists("replicas", key):
                return False
            tx.put("replicas", key, replica.to_record())
            return True

        if self.store.transact(work):
            logger.info(f"Replica of {replica.lfn} registered at {replica.storage_element}")
        return True

    def query_datasets(self, criteria: Optional[Dict[str, Any]] = None) -> List[Tuple[DatasetDescription, List[Replica]]]:
        """
        Conjunctive filter over pending and catalog entries, ordered by lfn.

        Args:
            criteria: Any of run_id, data_type, status, min_events.
        """
        criteria = {k: v for k, v in (criteria or {}).items() if v is not None and v != ""}
        unknown = set(criteria) - set(QUERY_KEYS)
        if unknown:
            raise InvalidParameters(f"unknown query keys: {', '.join(sorted(unknown))}")
        status = DatasetStatus(criteria["status"]) if "status" in criteria else None
        min_events = int(criteria.get("min_events", 0))

        def accept(dataset: DatasetDescription) -> bool:
            if "run_id" in criteria and dataset.run_id != criteria["run_id"]:
                return False
            if "data_type" in criteria and dataset.data_type != criteria["data_type"]:
                return False
            if status is not None and dataset.status != status:
                return False
            return dataset.events >= min_events

        def work(tx: Transaction) -> List[Tuple[DatasetDescription, List[Replica]]]:
            tables = []
            if status in (None, DatasetStatus.PENDING):
                tables.append("datasets_pending")
            if status != DatasetStatus.PENDING:
                tables.append("datasets_catalog")
            found = []
            for table in tables:
                for _, rec in tx.scan(table):
                    dataset = DatasetDescription.from_record(rec)
                    if accept(dataset):
                        found.append(dataset)
            found.sort(key=lambda d: d.lfn)
            return [
                (d, [Replica.from_record(r) for _, r in tx.scan("replicas", d.lfn + "|")])
                for d in found
            ]

        return self.store.transact(work)

    def pending(self, run_id: Optional[str] = None) -> List[DatasetDescription]:
        return [d for d, _ in self.query_datasets({"status": DatasetStatus.PENDING.value, "run_id": run_id})]

    def counts(self) -> Dict[str, int]:
        def work(tx: Transaction) -> Dict[str, int]:
            approved = rejected = 0
            for _, rec in tx.scan("datasets_catalog"):
                if rec["status"] == DatasetStatus.APPROVED.value:
                    approved += 1
                else:
                    rejected += 1
            return {
                "pending": tx.count("datasets_pending"),
                "approved": approved,
                "rejected": rejected,
                "replicas": tx.count("replicas"),
            }

        return self.store.transact(work)
