import threading

import pytest

from components.exceptions import IllegalState, InvalidParameters, InvalidPipeline, UnknownJob, UnknownRun, UnknownWorkflow
from components.model import JobState, ResourceCapability, StatusMessage, WorkflowDefinition
from services.config import ServiceConfig
from services.production_service import ProductionService
from services.rpc import ServiceBundle
from services.store import StoreHandle

from conftest import boole_step, gauss_step, two_step_workflow


def _cap(site: str = "A", cpu: float = 1.0, disk: int = 10_000) -> ResourceCapability:
    return ResourceCapability(site, cpu_power=cpu, free_disk_mb=disk)


def _service(bundle: ServiceBundle) -> ProductionService:
    return bundle.production


def test_define_workflow_round_trip(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    workflow_id = service.define_workflow(two_step_workflow())
    stored = service.get_workflow(workflow_id)
    assert stored.workflow_id == workflow_id
    assert stored.steps == two_step_workflow().steps
    assert stored.version == 1


def test_redefining_a_name_creates_versions(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    first = service.define_workflow(two_step_workflow())
    second = service.define_workflow(two_step_workflow())
    assert first != second
    assert [service.get_workflow(w).version for w in (first, second)] == [1, 2]
    assert len(service.list_workflows()) == 2


def test_invalid_pipeline_is_refused(bundle: ServiceBundle) -> None:
    with pytest.raises(InvalidPipeline) as info:
        WorkflowDefinition("", "broken", 1, (gauss_step(), boole_step(input_types=frozenset({"raw"}))))
    assert info.value.step_index == 1
    with pytest.raises(UnknownWorkflow):
        _service(bundle).get_workflow("wf-999999")


def test_create_run_queues_jobs(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    workflow_id = service.define_workflow(two_step_workflow())
    run_id, count = service.create_run(workflow_id, 100, 25)
    assert count == 4
    assert service.run_status(run_id) == {JobState.WAITING: 4}
    assert service.waiting_count() == 4
    _, record = service.get_job(f"{run_id}.000000")
    assert record.attempt == 1
    assert [h.reported_state for h in record.history] == [JobState.CREATED, JobState.WAITING]


def test_create_run_errors_and_token(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    with pytest.raises(UnknownWorkflow):
        service.create_run("wf-000042", 100, 25)
    workflow_id = service.define_workflow(two_step_workflow())
    first = service.create_run(workflow_id, 100, 25, request_token="batch-1")
    again = service.create_run(workflow_id, 100, 25, request_token="batch-1")
    assert first == again
    assert len(service.list_runs()) == 1
    with pytest.raises(UnknownRun):
        service.run_status("run-999999")


@pytest.mark.slow
def test_create_run_at_data_challenge_scale(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    workflow_id = service.define_workflow(two_step_workflow())
    _, count = service.create_run(workflow_id, 36600 * 500, 500)
    assert count == 36600


def test_request_job_on_empty_table(bundle: ServiceBundle) -> None:
    assert _service(bundle).request_job("A", _cap("A")) is None


def test_request_job_skips_other_destinations(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    workflow_id = service.define_workflow(two_step_workflow())
    pinned, _ = service.create_run(workflow_id, 10, 10, destination_site="B")
    free, _ = service.create_run(workflow_id, 10, 10)
    job = service.request_job("A", _cap("A"))
    assert job.run_id == free
    assert service.request_job("A", _cap("A")) is None
    assert service.request_job("B", _cap("B")).run_id == pinned


def test_request_job_serves_in_fifo_order(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    workflow_id = service.define_workflow(two_step_workflow())
    run_id, _ = service.create_run(workflow_id, 30, 10)
    served = [service.request_job("A", _cap("A")).sequence_index for _ in range(3)]
    assert served == [0, 1, 2]
    assert service.run_status(run_id) == {JobState.ASSIGNED: 3}


def test_request_job_checks_capability_site(bundle: ServiceBundle) -> None:
    with pytest.raises(InvalidParameters):
        _service(bundle).request_job("A", _cap("B"))


def test_run_status_after_serving_one(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    run_id, _ = service.create_run(service.define_workflow(two_step_workflow()), 100, 25)
    service.request_job("A", _cap("A"))
    assert service.run_status(run_id) == {JobState.WAITING: 3, JobState.ASSIGNED: 1}


def test_concurrent_requests_never_serve_a_job_twice() -> None:
    for _ in range(100):
        service = ProductionService(StoreHandle.open(None), ServiceConfig(store_path=None))
        workflow_id = service.define_workflow(two_step_workflow())
        service.create_run(workflow_id, 100, 10)
        barrier = threading.Barrier(64)
        results = []
        lock = threading.Lock()

        def pull(n: int) -> None:
            site = f"S{n:02d}"
            barrier.wait()
            job = service.request_job(site, _cap(site))
            with lock:
                results.append(job.job_id if job is not None else None)

        threads = [threading.Thread(target=pull, args=(n,)) for n in range(64)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        served = [job_id for job_id in results if job_id is not None]
        assert len(served) == 10
        assert len(set(served)) == 10
        assert results.count(None) == 54
        assert service.waiting_count() == 0


def test_reschedule_puts_job_back_with_next_attempt(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    service.create_run(service.define_workflow(two_step_workflow()), 10, 10)
    job = service.request_job("A", _cap("A"))
    assert service.reschedule(job.job_id, "app_failure") == JobState.WAITING
    _, record = service.get_job(job.job_id)
    assert record.attempt == 2
    assert record.history[-2].reported_state == JobState.FAILED
    assert record.history[-1].note == "rescheduled: app_failure"


def test_reschedule_stops_at_max_attempts(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    service.create_run(service.define_workflow(two_step_workflow()), 10, 10)
    job_id = None
    for _ in range(2):
        job_id = service.request_job("A", _cap("A")).job_id
        assert service.reschedule(job_id, "app_failure") == JobState.WAITING
    service.request_job("A", _cap("A"))
    assert service.reschedule(job_id, "app_failure") == JobState.FAILED
    _, record = service.get_job(job_id)
    assert record.attempt == 3
    assert record.history[-1].note == "attempts exhausted: app_failure"
    assert service.waiting_count() == 0


def test_rescheduled_job_moves_to_another_site(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    service.create_run(service.define_workflow(two_step_workflow()), 10, 10)
    job_id = service.request_job("A", _cap("A")).job_id
    service.reschedule(job_id, "submission_failure")
    assert service.request_job("A", _cap("A")) is None
    assert service.request_job("B", _cap("B")).job_id == job_id
    _, record = service.get_job(job_id)
    sites = {h.site_id for h in record.history if h.reported_state == JobState.ASSIGNED}
    assert sites == {"A", "B"}
    assert record.excluded_sites == ["A"]


def test_reschedule_refuses_live_jobs(bundle: ServiceBundle) -> None:
    service = _service(bundle)
    run_id, _ = service.create_run(service.define_workflow(two_step_workflow()), 10, 10)
    with pytest.raises(IllegalState):
        service.reschedule(f"{run_id}.000000", "app_failure")
    job_id = service.request_job("A", _cap("A")).job_id
    for step, state in enumerate((JobState.INSTALLING, JobState.SUBMITTED, JobState.RUNNING), start=1):
        bundle.monitoring.report_status(StatusMessage(job_id, state, "A", 1000.0 + step))
    with pytest.raises(IllegalState):
        service.reschedule(job_id, "app_failure")
    with pytest.raises(UnknownJob):
        service.reschedule("run-999999.000000", "app_failure")
