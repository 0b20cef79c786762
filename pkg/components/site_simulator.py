"""
site_simulator.py
Deterministic discrete-event model of production sites.

Each site has a batch queue with a fixed number of worker slots, local
storage for job outputs, and a failure policy. Storage elements hold the
copies produced by WAN transfers. All randomness of a site comes from one
seeded numpy generator, so a scenario replays identically for a given seed.
"""

import heapq
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from components.exceptions import BatchSubmissionFailed, InvalidParameters, UnknownSite

logger = logging.getLogger("site_simulator")

OUTCOME_SUCCESS = "success"
OUTCOME_APP_FAILURE = "app_failure"
OUTCOME_SITE_FAILURE = "site_failure"

BatchHook = Callable[[str, "BatchJob", Optional[int], float], None]


@dataclass(frozen=True)
class FailurePolicy:
    app_failure_prob: float = 0.0
    site_failure_prob: float = 0.0
    transfer_failure_prob: float = 0.0
    submission_failure_prob: float = 0.0
    rng_seed: int = 0
    transfer_corruption_prob: float = 0.0
    # Per-hour hazard of a site-class failure, so long jobs fail more often.
    duration_failure_rate: float = 0.0

    def __post_init__(self):
        for name in (
            "app_failure_prob",
            "site_failure_prob",
            "transfer_failure_prob",
            "submission_failure_prob",
            "transfer_corruption_prob",
        ):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise InvalidParameters(f"{name} must be within [0, 1], got {value}")
        if self.app_failure_prob + self.site_failure_prob > 1.0:
            raise InvalidParameters("app and site failure probabilities exceed 1 together")
        if self.duration_failure_rate < 0:
            raise InvalidParameters("duration_failure_rate must be non-negative")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise InvalidParameters("rng_seed must fit in 64 bits")


@dataclass(frozen=True)
class SiteConfig:
    site_id: str
    slot_count: int
    cpu_power: float = 1.0
    disk_quota_mb: int = 100_000
    shared_area_writable: bool = True
    wn_outbound_connectivity: bool = True
    failure_policy: FailurePolicy = field(default_factory=FailurePolicy)
    bandwidth_mb_s: float = 10.0
    inner_sites: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inner_sites", tuple(self.inner_sites))
        if not self.site_id:
            raise InvalidParameters("site_id must be non-empty")
        if self.slot_count < 1:
            raise InvalidParameters(f"{self.site_id}: slot_count must be at least 1")
        if self.cpu_power <= 0:
            raise InvalidParameters(f"{self.site_id}: cpu_power must be positive")
        if self.bandwidth_mb_s <= 0:
            raise InvalidParameters(f"{self.site_id}: bandwidth must be positive")

    @property
    def is_portal(self) -> bool:
        return bool(self.inner_sites)


@dataclass(frozen=True)
class SimFile:
    name: str
    size_bytes: int
    checksum: int


@dataclass(frozen=True)
class SimEvent:
    time: float
    seq: int
    site_id: str
    kind: str
    detail: str

    def log_line(self) -> str:
        return format_event(self.time, self.site_id, self.kind, self.detail)


def format_event(time: float, site_id: str, kind: str, detail: str) -> str:
    return f"t={time:.3f} site={site_id} kind={kind} detail={detail}"


@dataclass
class BatchJob:
    batch_id: str
    site_id: str
    label: str
    script: str
    nominal_runtime: float
    steps: int
    outputs: Tuple[SimFile, ...]
    state: str = "queued"
    outcome: Optional[str] = None
    submitted_at: float = 0.0
    started_at: Optional[float] = None
    finished_at: Optional[float] = None

    @property
    def cpu_seconds(self) -> float:
        if self.started_at is None or self.finished_at is None:
            return 0.0
        return self.finished_at - self.started_at


@dataclass(frozen=True)
class TransferResult:
    ok: bool
    duration: float
    corrupted: bool = False


class SimClock:
    """Virtual time plus the pending-event queue; equal times fire in insertion order."""

    def __init__(self):
        self.now = 0.0
        self._queue: List[Tuple[float, int, SimEvent, Callable[[], None]]] = []
        self._seq = 0

    def schedule(self, time: float, site_id: str, kind: str, detail: str, action: Callable[[], None]) -> SimEvent:
        if time < self.now:
            raise InvalidParameters(f"cannot schedule at {time} before now={self.now}")
        self._seq += 1
        event = SimEvent(time, self._seq, site_id, kind, detail)
        heapq.heappush(self._queue, (time, self._seq, event, action))
        return event

    @property
    def seq(self) -> int:
        return self._seq

    def pending(self) -> int:
        return len(self._queue)

    def next_time(self) -> Optional[float]:
        return self._queue[0][0] if self._queue else None

    def pop_until(self, until: float) -> Optional[Tuple[SimEvent, Callable[[], None]]]:
        if not self._queue or self._queue[0][0] > until:
            return None
        time, _, event, action = heapq.heappop(self._queue)
        self.now = time
        return event, action

    def events(self) -> List[SimEvent]:
        return [event for _, _, event, _ in sorted(self._queue, key=lambda item: (item[0], item[1]))]

    def restore(self, now: float, seq: int, events: Iterable[Tuple[SimEvent, Callable[[], None]]]) -> None:
        self.now = now
        self._seq = seq
        self._queue = [(event.time, event.seq, event, action) for event, action in events]
        heapq.heapify(self._queue)


class _Site:
    def __init__(self, config: SiteConfig):
        self.config = config
        self.rng = np.random.default_rng(config.failure_policy.rng_seed)
        self.queue: List[str] = []
        self.running: List[str] = []
        self.storage: Dict[str, SimFile] = {}
        self.hook: Optional[BatchHook] = None
        self.submitted = 0
        self.completed = 0


class SiteSimulator:
    """
    The simulated grid. Single-threaded: callers serialize every interaction
    onto the thread that owns the simulator.
    """

    def __init__(self, sites: Iterable[SiteConfig] = ()):
        self.clock = SimClock()
        self.sites: Dict[str, _Site] = {}
        self.jobs: Dict[str, BatchJob] = {}
        self.storage_elements: Dict[str, Dict[str, SimFile]] = {}
        self.event_log: List[str] = []
        self._batch_seq = 0
        for config in sites:
            self.add_site(config)

    # ------------------------------------------------------------------ #
    # Setup
    # ------------------------------------------------------------------ #
    def add_site(self, config: SiteConfig) -> None:
        if config.site_id in self.sites:
            raise InvalidParameters(f"site {config.site_id} already defined")
        self.sites[config.site_id] = _Site(config)

    def site(self, site_id: str) -> SiteConfig:
        return self._site(site_id).config

    def _site(self, site_id: str) -> _Site:
        site = self.sites.get(site_id)
        if site is None:
            raise UnknownSite(f"no site '{site_id}'")
        return site

    def set_worker_hook(self, site_id: str, hook: Optional[BatchHook]) -> None:
        """Install the callback run on worker-node events (job start, step start, job end)."""
        self._site(site_id).hook = hook

    def record(self, site_id: str, kind: str, detail: str) -> None:
        """Append an externally observed action to the event log at the current time."""
        self.event_log.append(format_event(self.clock.now, site_id, kind, detail))

    # ------------------------------------------------------------------ #
    # Batch system
    # ------------------------------------------------------------------ #
    def batch_submit(
        self,
        site_id: str,
        script: str,
        nominal_runtime: float,
        label: str = "",
        steps: int = 1,
        outputs: Sequence[SimFile] = (),
    ) -> str:
        """
        Queue a job on a site's batch system; it starts as soon as a slot is free.

        Raises:
            UnknownSite, BatchSubmissionFailed
        """
        site = self._site(site_id)
        policy = site.config.failure_policy
        if policy.submission_failure_prob > 0 and site.rng.random() < policy.submission_failure_prob:
            self.record(site_id, "submit_refused", label or "-")
            raise BatchSubmissionFailed(f"{site_id} refused {label or 'job'}")
        self._batch_seq += 1
        batch_id = f"{site_id}-{self._batch_seq:06d}"
        job = BatchJob(
            batch_id=batch_id,
            site_id=site_id,
            label=label,
            script=script,
            nominal_runtime=float(nominal_runtime),
            steps=max(1, int(steps)),
            outputs=tuple(outputs),
            submitted_at=self.clock.now,
        )
        self.jobs[batch_id] = job
        site.queue.append(batch_id)
        site.submitted += 1
        self.record(site_id, "submit", f"{batch_id} {label}".strip())
        self._dispatch(site)
        return batch_id

    def _draw_outcome(self, site: _Site, runtime: float) -> str:
        policy = site.config.failure_policy
        draw = site.rng.random()
        if draw < policy.app_failure_prob:
            return OUTCOME_APP_FAILURE
        if draw < policy.app_failure_prob + policy.site_failure_prob:
            return OUTCOME_SITE_FAILURE
        if policy.duration_failure_rate > 0:
            hazard = 1.0 - math.exp(-policy.duration_failure_rate * runtime / 3600.0)
            if site.rng.random() < hazard:
                return OUTCOME_SITE_FAILURE
        return OUTCOME_SUCCESS

    def _dispatch(self, site: _Site) -> None:
        while site.queue and len(site.running) < site.config.slot_count:
            batch_id = site.queue.pop(0)
            job = self.jobs[batch_id]
            now = self.clock.now
            runtime = job.nominal_runtime / site.config.cpu_power
            job.state = "running"
            job.started_at = now
            job.outcome = self._draw_outcome(site, runtime)
            site.running.append(batch_id)
            self.record(site.config.site_id, "start", batch_id)
            for index in range(job.steps):
                self.clock.schedule(
                    now + runtime * index / job.steps,
                    site.config.site_id,
                    "step",
                    f"{batch_id} {index}",
                    lambda job=job, index=index: self._worker_event("step", job, index),
                )
            self.clock.schedule(
                now + runtime, site.config.site_id, "finish", f"{batch_id} {job.outcome}", lambda job=job: self._finish(job)
            )

    def _worker_event(self, kind: str, job: BatchJob, index: Optional[int]) -> None:
        hook = self.sites[job.site_id].hook
        if hook is not None:
            hook(kind, job, index, self.clock.now)

    def _finish(self, job: BatchJob) -> None:
        site = self.sites[job.site_id]
        job.finished_at = self.clock.now
        job.state = "done" if job.outcome == OUTCOME_SUCCESS else "failed"
        site.running.remove(job.batch_id)
        site.completed += 1
        if job.state == "done":
            for produced in job.outputs:
                site.storage[produced.name] = produced
        self._worker_event("finish", job, None)
        self._dispatch(site)

    def batch_status(self, site_id: str) -> Dict[str, Any]:
        site = self._site(site_id)
        return {
            "queued": len(site.queue),
            "running": len(site.running),
            "slot_count": site.config.slot_count,
            "jobs": {bid: job.state for bid, job in self.jobs.items() if job.site_id == site_id},
        }

    def batch_job(self, batch_id: str) -> BatchJob:
        job = self.jobs.get(batch_id)
        if job is None:
            raise InvalidParameters(f"no batch job '{batch_id}'")
        return job

    def forget(self, batch_id: str) -> None:
        """Drop a finished job once its owner has collected the outcome."""
        job = self.jobs.get(batch_id)
        if job is not None and job.state in ("done", "failed"):
            del self.jobs[batch_id]

    def _fire_until(self, until: float) -> List[SimEvent]:
        # Actions may call back in here (a blocking transfer inside a worker hook).
        fired = []
        while True:
            item = self.clock.pop_until(until)
            if item is None:
                break
            event, action = item
            self.event_log.append(event.log_line())
            action()
            fired.append(event)
        return fired

    def advance(self, until: float) -> List[SimEvent]:
        """Fire every pending event with time <= until, in order."""
        if until < self.clock.now:
            raise InvalidParameters(f"cannot advance backwards to {until} from {self.clock.now}")
        fired = self._fire_until(until)
        self.clock.now = max(self.clock.now, until)
        return fired

    # ------------------------------------------------------------------ #
    # Persistence
    # ------------------------------------------------------------------ #
    def snapshot(self) -> Dict[str, Any]:
        """JSON-ready state of the batch systems, storage and pending events. Hooks are not saved."""
        return {
            "now": self.clock.now,
            "event_seq": self.clock.seq,
            "batch_seq": self._batch_seq,
            "jobs": {batch_id: asdict(job) for batch_id, job in self.jobs.items()},
            "sites": {
                site_id: {
                    "queue": list(site.queue),
                    "running": list(site.running),
                    "storage": [asdict(f) for f in site.storage.values()],
                    "rng": site.rng.bit_generator.state,
                    "submitted": site.submitted,
                    "completed": site.completed,
                }
                for site_id, site in self.sites.items()
            },
            "storage_elements": {se: [asdict(f) for f in files.values()] for se, files in self.storage_elements.items()},
            "events": [asdict(event) for event in self.clock.events()],
        }

    def restore(self, state: Dict[str, Any]) -> None:
        """
        Load a snapshot into a simulator built with the same site configurations.

        Raises:
            UnknownSite: The snapshot names a site this simulator does not have.
            InvalidParameters: The snapshot is malformed or holds a transient event.
        """
        try:
            jobs = {}
            for batch_id, rec in state["jobs"].items():
                rec = dict(rec, outputs=tuple(SimFile(**f) for f in rec["outputs"]))
                jobs[batch_id] = BatchJob(**rec)
            for site_id, saved in state["sites"].items():
                site = self._site(site_id)
                site.queue = list(saved["queue"])
                site.running = list(saved["running"])
                site.storage = {f["name"]: SimFile(**f) for f in saved["storage"]}
                site.rng.bit_generator.state = saved["rng"]
                site.submitted = saved["submitted"]
                site.completed = saved["completed"]
            self.jobs = jobs
            self.storage_elements = {
                se: {f["name"]: SimFile(**f) for f in files} for se, files in state["storage_elements"].items()
            }
            events = [SimEvent(**rec) for rec in state["events"]]
            self._batch_seq = state["batch_seq"]
            self.clock.restore(state["now"], state["event_seq"], [(event, self._event_action(event)) for event in events])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidParameters(f"unreadable batch system snapshot: {exc}") from exc

    def _event_action(self, event: SimEvent) -> Callable[[], None]:
        batch_id, _, arg = event.detail.partition(" ")
        job = self.jobs.get(batch_id)
        if job is None:
            raise InvalidParameters(f"snapshot event for unknown batch job '{batch_id}'")
        if event.kind == "step":
            return lambda: self._worker_event("step", job, int(arg))
        if event.kind == "finish":
            return lambda: self._finish(job)
        raise InvalidParameters(f"cannot restore a pending '{event.kind}' event")

    # ------------------------------------------------------------------ #
    # Storage and WAN
    # ------------------------------------------------------------------ #
    def local_file(self, site_id: str, name: str) -> Optional[SimFile]:
        return self._site(site_id).storage.get(name)

    def remove_local(self, site_id: str, name: str) -> None:
        self._site(site_id).storage.pop(name, None)

    def se_lookup(self, storage_element: str, name: str) -> Optional[SimFile]:
        return self.storage_elements.get(storage_element, {}).get(name)

    def wan_transfer(self, src_site: str, storage_element: str, name: str) -> TransferResult:
        """
        Copy a file from a site's local storage to a storage element.

        The copy arrives size/bandwidth later: the call blocks in simulated
        time, firing every event due before the arrival. The transfer fails
        with the site's transfer_failure_prob; a successful one may still
        deliver a corrupted copy (transfer_corruption_prob).
        """
        site = self._site(src_site)
        source = site.storage.get(name)
        if source is None:
            self.record(src_site, "transfer", f"{name} -> {storage_element} missing")
            return TransferResult(ok=False, duration=0.0)
        policy = site.config.failure_policy
        duration = source.size_bytes / (site.config.bandwidth_mb_s * 1_000_000)
        arrival = self.clock.now + duration
        if site.rng.random() < policy.transfer_failure_prob:
            self.clock.schedule(arrival, src_site, "transfer", f"{name} -> {storage_element} failed", lambda: None)
            self._fire_until(arrival)
            return TransferResult(ok=False, duration=duration)
        corrupted = policy.transfer_corruption_prob > 0 and site.rng.random() < policy.transfer_corruption_prob
        copy = SimFile(source.name, source.size_bytes, source.checksum ^ 0x1 if corrupted else source.checksum)

        def land() -> None:
            self.storage_elements.setdefault(storage_element, {})[name] = copy

        detail = f"{name} -> {storage_element} {'corrupted' if corrupted else 'ok'} {duration:.3f}s"
        self.clock.schedule(arrival, src_site, "transfer", detail, land)
        self._fire_until(arrival)
        return TransferResult(ok=True, duration=duration, corrupted=corrupted)
