"""
store.py
The production database: a file-backed, transactional record store shared by
the central services.

On disk a store directory holds ``snapshot.db`` (last compacted state) and
``journal.log`` (committed transactions since). Both are sequences of frames
``>II`` (payload length, crc32) followed by a JSON payload. A damaged frame at
the very end of the journal is a torn write and is discarded on replay; damage
anywhere else refuses the open.

Transactions are optimistic: reads record the version they saw, writes are
buffered, and commit validates the read set under the commit lock. A lost race
retries the transaction function; after repeated conflicts it runs exclusively.
"""

import bisect
import hashlib
import json
import logging
import os
import struct
import threading
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple, TypeVar, Union

from components.exceptions import Conflict, CorruptJournal, IoFailure
from components.model import checksum32

logger = logging.getLogger("store")

T = TypeVar("T")

HEADER = struct.Struct(">II")
JOURNAL_NAME = "journal.log"
SNAPSHOT_NAME = "snapshot.db"


def _encode(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def _frame(payload: Any) -> bytes:
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    return HEADER.pack(len(body), checksum32(body)) + body


class Transaction:
    """One unit of work against a StoreHandle; only valid inside ``transact``."""

    def __init__(self, store: "StoreHandle"):
        self._store = store
        self.reads: Dict[Tuple[str, str], int] = {}
        self.scans: Dict[str, int] = {}
        self.writes: Dict[Tuple[str, str], Optional[str]] = {}

    def get(self, table: str, key: str, default: Any = None) -> Any:
        if (table, key) in self.writes:
            raw = self.writes[(table, key)]
        else:
            raw, version = self._store._read(table, key)
            self.reads.setdefault((table, key), version)
        return default if raw is None else json.loads(raw)

    def exists(self, table: str, key: str) -> bool:
        return self.get(table, key) is not None

    def put(self, table: str, key: str, value: Any) -> None:
        self.writes[(table, key)] = _encode(value)

    def delete(self, table: str, key: str) -> None:
        self.writes[(table, key)] = None

    def scan(self, table: str, prefix: str = "") -> Iterator[Tuple[str, Any]]:
        """Yield (key, value) pairs of a table in key order, including this transaction's writes."""
        keys = self._store._keys_snapshot(table, prefix, self)
        local = {key: raw for (tbl, key), raw in self.writes.items() if tbl == table and key.startswith(prefix)}
        merged = sorted(set(keys) | set(local))
        for key in merged:
            if key in local:
                raw = local[key]
            else:
                raw, _ = self._store._read(table, key)
            if raw is not None:
                yield key, json.loads(raw)

    def count(self, table: str, prefix: str = "") -> int:
        return sum(1 for _ in self.scan(table, prefix))

    def next_id(self, counter: str) -> int:
        value = self.get("counters", counter, 0) + 1
        self.put("counters", counter, value)
        return value


class StoreHandle:
    """Embeddable record store. ``root_path=None`` keeps everything in memory."""

    def __init__(self, root_path: Optional[Union[str, Path]] = None, fsync: bool = True, optimistic_attempts: int = 8):
        self.root_path = Path(root_path) if root_path is not None else None
        self.fsync = fsync
        self.optimistic_attempts = optimistic_attempts
        self._lock = threading.RLock()
        self._tables: Dict[str, Dict[str, str]] = {}
        self._keys: Dict[str, List[str]] = {}
        self._versions: Dict[Tuple[str, str], int] = {}
        self._table_versions: Dict[str, int] = {}
        self._clock = 0
        self._journal = None
        self.commits = 0
        self.conflicts = 0
        if self.root_path is not None:
            self._load()

    @classmethod
    def open(cls, root_path: Optional[Union[str, Path]], fsync: bool = True) -> "StoreHandle":
        return cls(root_path, fsync=fsync)

    # ------------------------------------------------------------------ #
    # Recovery
    # ------------------------------------------------------------------ #
    def _load(self) -> None:
        try:
            self.root_path.mkdir(parents=True, exist_ok=True)
            snapshot = self.root_path / SNAPSHOT_NAME
            if snapshot.exists():
                for _, record in self._frames(snapshot.read_bytes(), tolerate_tail=False):
                    table, key, value = record
                    self._apply_one(table, key, value)
            journal = self.root_path / JOURNAL_NAME
            good = 0
            replayed = 0
            if journal.exists():
                data = journal.read_bytes()
                for end, record in self._frames(data, tolerate_tail=True):
                    self._apply_ops(record["ops"])
                    good = end
                    replayed += 1
                if good < len(data):
                    logger.warning(f"Discarding torn journal tail: {len(data) - good} bytes at offset {good}")
                    with open(journal, "r+b") as fh:
                        fh.truncate(good)
            self._journal = open(journal, "ab")
            logger.info(f"Store opened at {self.root_path}: {replayed} journal transactions replayed")
        except OSError as exc:
            raise IoFailure(f"cannot open store at {self.root_path}: {exc}")

    @staticmethod
    def _frames(data: bytes, tolerate_tail: bool) -> Iterator[Tuple[int, Any]]:
        offset = 0
        while offset < len(data):
            if offset + HEADER.size > len(data):
                if tolerate_tail:
                    return
                raise CorruptJournal(offset, "truncated header")
            length, crc = HEADER.unpack_from(data, offset)
            end = offset + HEADER.size + length
            if end > len(data):
                if tolerate_tail:
                    return
                raise CorruptJournal(offset, "truncated record")
            body = data[offset + HEADER.size:end]
            record = None
            if checksum32(body) == crc:
                try:
                    record = json.loads(body.decode("utf-8"))
                except (UnicodeDecodeError, ValueError):
                    record = None
            if record is None:
                if tolerate_tail and end == len(data):
                    return
                raise CorruptJournal(offset, "checksum mismatch")
            yield end, record
            offset = end

    # ------------------------------------------------------------------ #
    # State plumbing
    # ------------------------------------------------------------------ #
    def _apply_one(self, table: str, key: str, raw: Optional[str]) -> None:
        rows = self._tables.setdefault(table, {})
        keys = self._keys.setdefault(table, [])
        self._clock += 1
        if raw is None:
            if key in rows:
                del rows[key]
                keys.pop(bisect.bisect_left(keys, key))
        else:
            if key not in rows:
                bisect.insort(keys, key)
            rows[key] = raw
        self._versions[(table, key)] = self._clock
        self._table_versions[table] = self._clock

    def _apply_ops(self, ops: List[List[Any]]) -> None:
        for op in ops:
            if op[0] == "put":
                self._apply_one(op[1], op[2], op[3])
            else:
                self._apply_one(op[1], op[2], None)

    def _read(self, table: str, key: str) -> Tuple[Optional[str], int]:
        with self._lock:
            return self._tables.get(table, {}).get(key), self._versions.get((table, key), 0)

    def _keys_snapshot(self, table: str, prefix: str, tx: Transaction) -> List[str]:
        with self._lock:
            tx.scans.setdefault(table, self._table_versions.get(table, 0))
            keys = self._keys.get(table, [])
            if not prefix:
                return list(keys)
            start = bisect.bisect_left(keys, prefix)
            stop = bisect.bisect_left(keys, prefix + "\U0010ffff")
            return keys[start:stop]

    def _valid(self, tx: Transaction) -> bool:
        for (table, key), version in tx.reads.items():
            if self._versions.get((table, key), 0) != version:
                return False
        for table, version in tx.scans.items():
            if self._table_versions.get(table, 0) != version:
                return False
        return True

    def _commit(self, tx: Transaction) -> None:
        with self._lock:
            if not self._valid(tx):
                self.conflicts += 1
                raise Conflict("read set changed before commit")
            if not tx.writes:
                return
            ops = []
            for (table, key), raw in tx.writes.items():
                ops.append(["put", table, key, raw] if raw is not None else ["del", table, key])
            if self._journal is not None:
                self._append({"ops": ops})
            self._apply_ops(ops)
            self.commits += 1

    def _append(self, payload: Any) -> None:
        try:
            self._journal.write(_frame(payload))
            self._journal.flush()
            if self.fsync:
                os.fsync(self._journal.fileno())
        except OSError as exc:
            raise IoFailure(f"journal write failed: {exc}")

    # ------------------------------------------------------------------ #
    # Public API
    # ------------------------------------------------------------------ #
    def transact(self, fn: Callable[[Transaction], T], max_attempts: Optional[int] = None, exclusive_fallback: bool = True) -> T:
        """Run ``fn`` as one serializable, atomic transaction and return its result."""
        attempts = self.optimistic_attempts if max_attempts is None else max_attempts
        for _ in range(attempts):
            tx = Transaction(self)
            try:
                result = fn(tx)
            except Exception:
                # An error seen through a stale read is retried; a real one propagates.
                with self._lock:
                    if self._valid(tx):
                        raise
                continue
            try:
                self._commit(tx)
                return result
            except Conflict:
                continue
        if not exclusive_fallback:
            raise Conflict(f"transaction lost {attempts} optimistic attempts")
        with self._lock:
            tx = Transaction(self)
            result = fn(tx)
            self._commit(tx)
            return result

    def compact(self) -> Dict[str, int]:
        """Rewrite the snapshot from the current state and truncate the journal."""
        with self._lock:
            records = sum(len(rows) for rows in self._tables.values())
            stats = {"records": records, "tables": sum(1 for rows in self._tables.values() if rows), "snapshot_bytes": 0}
            if self.root_path is None:
                return stats
            snapshot = self.root_path / SNAPSHOT_NAME
            tmp = self.root_path / (SNAPSHOT_NAME + ".tmp")
            try:
                with open(tmp, "wb") as fh:
                    for table in sorted(self._tables):
                        rows = self._tables[table]
                        for key in self._keys[table]:
                            fh.write(_frame([table, key, rows[key]]))
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, snapshot)
                self._journal.close()
                self._journal = open(self.root_path / JOURNAL_NAME, "wb")
                self._journal.close()
                self._journal = open(self.root_path / JOURNAL_NAME, "ab")
                stats["snapshot_bytes"] = snapshot.stat().st_size
            except OSError as exc:
                raise IoFailure(f"compaction failed: {exc}")
            logger.info(f"Compacted store: {records} records, {stats['snapshot_bytes']} bytes")
            return stats

    def state_hash(self) -> str:
        digest = hashlib.sha256()
        with self._lock:
            for table in sorted(self._tables):
                rows = self._tables[table]
                for key in self._keys[table]:
                    digest.update(json.dumps([table, key, rows[key]]).encode("utf-8"))
        return digest.hexdigest()

    def snapshot_state(self) -> Dict[str, Dict[str, Any]]:
        with self._lock:
            return {
                table: {key: json.loads(raw) for key, raw in rows.items()}
                for table, rows in self._tables.items()
                if rows
            }

    def close(self) -> None:
        with self._lock:
            if self._journal is not None:
                self._journal.close()
                self._journal = None
