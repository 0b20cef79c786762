import json
from typing import List

import pytest

from components.exceptions import BatchSubmissionFailed, InvalidParameters, UnknownSite
from components.site_simulator import (
    OUTCOME_APP_FAILURE,
    OUTCOME_SUCCESS,
    FailurePolicy,
    SimFile,
    SiteConfig,
    SiteSimulator,
    format_event,
)


def _finish_times(sim: SiteSimulator) -> List[float]:
    return [event.time for event in sim.advance(10_000.0) if event.kind == "finish"]


def test_one_slot_runs_jobs_back_to_back() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1)])
    sim.batch_submit("A", "run.sh", 100)
    sim.batch_submit("A", "run.sh", 100)
    assert sim.batch_status("A")["queued"] == 1
    assert _finish_times(sim) == [100.0, 200.0]


def test_cpu_power_scales_runtime() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1, cpu_power=2.0)])
    batch_id = sim.batch_submit("A", "run.sh", 100)
    assert _finish_times(sim) == [50.0]
    job = sim.batch_job(batch_id)
    assert job.state == "done" and job.cpu_seconds == 50.0


def test_batch_status() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=2)])
    assert sim.batch_status("A") == {"queued": 0, "running": 0, "slot_count": 2, "jobs": {}}
    first = sim.batch_submit("A", "run.sh", 10)
    second = sim.batch_submit("A", "run.sh", 10)
    assert first != second
    status = sim.batch_status("A")
    assert status["running"] == 2 and status["jobs"] == {first: "running", second: "running"}
    with pytest.raises(UnknownSite):
        sim.batch_status("B")
    with pytest.raises(InvalidParameters):
        sim.batch_job("A-999999")


def test_submission_failure() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1, failure_policy=FailurePolicy(submission_failure_prob=1.0))])
    for _ in range(5):
        with pytest.raises(BatchSubmissionFailed):
            sim.batch_submit("A", "run.sh", 10)
    assert sim.batch_status("A")["jobs"] == {}


def test_app_failures_produce_no_outputs() -> None:
    policy = FailurePolicy(app_failure_prob=1.0)
    sim = SiteSimulator([SiteConfig("A", slot_count=1, failure_policy=policy)])
    batch_id = sim.batch_submit("A", "run.sh", 10, outputs=[SimFile("out.sim", 100, 7)])
    sim.advance(100.0)
    job = sim.batch_job(batch_id)
    assert job.outcome == OUTCOME_APP_FAILURE and job.state == "failed"
    assert sim.local_file("A", "out.sim") is None


def test_steps_and_worker_hook() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1)])
    seen = []
    sim.set_worker_hook("A", lambda kind, job, index, now: seen.append((kind, index, now)))
    sim.batch_submit("A", "run.sh", 90, steps=3, outputs=[SimFile("out.sim", 100, 7)])
    sim.advance(1000.0)
    assert seen == [("step", 0, 0.0), ("step", 1, 30.0), ("step", 2, 60.0), ("finish", None, 90.0)]
    assert sim.local_file("A", "out.sim") == SimFile("out.sim", 100, 7)
    assert sim.batch_job("A-000001").outcome == OUTCOME_SUCCESS


def test_transfer_probabilities() -> None:
    out = SimFile("out.sim", 10_000_000, 42)
    for prob, expect_ok in ((0.0, True), (1.0, False)):
        sim = SiteSimulator([SiteConfig("A", slot_count=1, failure_policy=FailurePolicy(transfer_failure_prob=prob))])
        sim.batch_submit("A", "run.sh", 1, outputs=[out])
        sim.advance(10.0)
        results = [sim.wan_transfer("A", "SE", "out.sim") for _ in range(20)]
        assert all(r.ok == expect_ok for r in results)
    assert results[0].duration == pytest.approx(1.0)


def test_transfer_failure_rate_is_seeded() -> None:
    policy = FailurePolicy(transfer_failure_prob=0.5, rng_seed=1234)
    sim = SiteSimulator([SiteConfig("A", slot_count=1, failure_policy=policy)])
    sim.batch_submit("A", "run.sh", 1, outputs=[SimFile("out.sim", 100, 1)])
    sim.advance(10.0)
    failures = sum(1 for _ in range(1000) if not sim.wan_transfer("A", "SE", "out.sim").ok)
    assert 450 <= failures <= 550


def test_corrupted_copy_has_other_checksum() -> None:
    policy = FailurePolicy(transfer_corruption_prob=1.0)
    sim = SiteSimulator([SiteConfig("A", slot_count=1, failure_policy=policy)])
    sim.batch_submit("A", "run.sh", 1, outputs=[SimFile("out.sim", 100, 8)])
    sim.advance(10.0)
    result = sim.wan_transfer("A", "SE", "out.sim")
    assert result.ok and result.corrupted
    assert sim.se_lookup("SE", "out.sim").checksum == 9
    assert not sim.wan_transfer("A", "SE", "missing.sim").ok


def test_advance_with_empty_queue() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1)])
    assert sim.advance(50.0) == []
    assert sim.clock.now == 50.0
    with pytest.raises(InvalidParameters):
        sim.advance(10.0)


def test_same_seed_gives_identical_logs() -> None:
    def replay() -> List[str]:
        policy = FailurePolicy(app_failure_prob=0.2, site_failure_prob=0.1, transfer_failure_prob=0.3, rng_seed=99)
        sim = SiteSimulator([SiteConfig("A", slot_count=3, failure_policy=policy), SiteConfig("B", slot_count=2)])
        for n in range(30):
            site = "A" if n % 3 else "B"
            sim.batch_submit(site, "run.sh", 50 + n, label=f"job-{n}", outputs=[SimFile(f"f{n}", 100, n)])
        sim.advance(5000.0)
        for n in range(30):
            sim.wan_transfer("A" if n % 3 else "B", "SE", f"f{n}")
        return sim.event_log

    first = replay()
    assert first == replay()
    assert first[0] == format_event(0.0, "B", "submit", "B-000001 job-0")


def test_policy_validation() -> None:
    with pytest.raises(InvalidParameters):
        FailurePolicy(app_failure_prob=1.5)
    with pytest.raises(InvalidParameters):
        FailurePolicy(app_failure_prob=0.6, site_failure_prob=0.6)
    with pytest.raises(InvalidParameters):
        SiteConfig("A", slot_count=0)


def test_transfer_lands_only_after_its_duration() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1, bandwidth_mb_s=10.0)])
    sim.batch_submit("A", "run.sh", 5, outputs=[SimFile("out.sim", 10_000_000, 3)])
    sim.advance(5.0)
    seen = []
    sim.set_worker_hook("A", lambda kind, job, index, now: seen.append((kind, now, sim.se_lookup("SE", "out.sim"))))
    sim.batch_submit("A", "short.sh", 0.5)

    result = sim.wan_transfer("A", "SE", "out.sim")
    assert result.ok and result.duration == pytest.approx(1.0)
    assert seen == [("step", 5.0, None), ("finish", 5.5, None)]
    assert sim.clock.now == pytest.approx(6.0)
    assert sim.se_lookup("SE", "out.sim") == SimFile("out.sim", 10_000_000, 3)
    assert sim.event_log[-1] == format_event(6.0, "A", "transfer", "out.sim -> SE ok 1.000s")


def test_failed_transfer_also_takes_time() -> None:
    policy = FailurePolicy(transfer_failure_prob=1.0)
    sim = SiteSimulator([SiteConfig("A", slot_count=1, bandwidth_mb_s=2.0, failure_policy=policy)])
    sim.batch_submit("A", "run.sh", 1, outputs=[SimFile("out.sim", 1_000_000, 3)])
    sim.advance(10.0)
    assert not sim.wan_transfer("A", "SE", "out.sim").ok
    assert sim.clock.now == pytest.approx(10.5)
    assert sim.se_lookup("SE", "out.sim") is None
    sim.advance(20.0)
    assert sim.clock.now == 20.0


def test_forget_drops_only_finished_jobs() -> None:
    sim = SiteSimulator([SiteConfig("A", slot_count=1)])
    first = sim.batch_submit("A", "run.sh", 10)
    second = sim.batch_submit("A", "run.sh", 10)
    sim.advance(10.0)
    sim.forget(first)
    sim.forget(second)
    sim.forget("A-999999")
    assert sim.batch_status("A")["jobs"] == {second: "running"}
    with pytest.raises(InvalidParameters):
        sim.batch_job(first)


def test_snapshot_resumes_identically() -> None:
    sites = [
        SiteConfig("A", slot_count=2, failure_policy=FailurePolicy(app_failure_prob=0.3, transfer_failure_prob=0.4, rng_seed=5)),
        SiteConfig("B", slot_count=1),
    ]

    def submit(sim: SiteSimulator, first: int) -> None:
        for n in range(first, first + 4):
            sim.batch_submit("A" if n % 2 else "B", "run.sh", 10 + n, label=f"job-{n}", steps=2, outputs=[SimFile(f"f{n}", 100, n)])

    original = SiteSimulator(sites)
    submit(original, 0)
    original.advance(15.0)
    original.wan_transfer("B", "SE", "f0")
    state = json.loads(json.dumps(original.snapshot()))

    restored = SiteSimulator(sites)
    restored.restore(state)
    mark = len(original.event_log)
    for sim in (original, restored):
        submit(sim, 4)
        sim.advance(500.0)
        for n in range(8):
            sim.wan_transfer("A" if n % 2 else "B", "SE", f"f{n}")
    assert restored.event_log == original.event_log[mark:]
    assert restored.storage_elements == original.storage_elements
    assert restored.batch_status("A") == original.batch_status("A")
    assert restored.snapshot() == original.snapshot()

    with pytest.raises(InvalidParameters):
        SiteSimulator(sites).restore({"jobs": {}})
