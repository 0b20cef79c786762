import pytest

from components.exceptions import InvalidParameters, InvalidPipeline, MismatchedWorkflow
from components.model import (
    LEGAL_TRANSITIONS,
    JobRequirements,
    JobState,
    ProductionRun,
    ResourceCapability,
    StepDefinition,
    WorkflowDefinition,
    is_terminal,
    match_job,
    output_datasets,
    split_run,
    validate_transition,
)

from conftest import boole_step, gauss_step


def _workflow() -> WorkflowDefinition:
    return WorkflowDefinition("wf-1", "mc", 1, (gauss_step(), boole_step()))


def _run(total: int, per_job: int, **kwargs) -> ProductionRun:
    return ProductionRun("run-000001", "wf-1", total, per_job, **kwargs)


def test_validate_transition_examples() -> None:
    assert validate_transition(JobState.WAITING, JobState.ASSIGNED)
    assert not validate_transition(JobState.DONE, JobState.WAITING)
    assert not validate_transition(JobState.FAILED, JobState.WAITING)
    assert validate_transition(JobState.FAILED, JobState.WAITING, rescheduling=True)
    assert not validate_transition(JobState.ASSIGNED, JobState.DONE)


def test_transition_table_size() -> None:
    # 7 forward steps plus 5 active states that may fail
    assert len(LEGAL_TRANSITIONS) == 12
    for state in JobState:
        assert not validate_transition(JobState.DONE, state)
    assert is_terminal(JobState.DONE) and is_terminal(JobState.FAILED)
    assert not is_terminal(JobState.RUNNING)


@pytest.mark.parametrize(
    "total, per_job, sizes",
    [
        (100, 25, [25, 25, 25, 25]),
        (10, 3, [3, 3, 3, 1]),
        (1, 500, [1]),
    ],
)
def test_split_run_sizes(total: int, per_job: int, sizes: list) -> None:
    jobs = split_run(_run(total, per_job), _workflow())
    assert [j.events for j in jobs] == sizes
    assert [j.sequence_index for j in jobs] == list(range(len(sizes)))


def test_split_run_partitions_event_range() -> None:
    jobs = split_run(_run(1037, 100), _workflow())
    covered = 0
    for job in jobs:
        assert job.first_event_offset == covered
        covered += job.events
    assert covered == 1037
    assert jobs[0].job_id == "run-000001.000000"
    assert jobs[-1].job_id == "run-000001.000010"


def test_split_run_resolves_overrides_and_software() -> None:
    run = _run(100, 50, extra_options=(("generator", "herwig"), ("unknown", "x")))
    job = split_run(run, _workflow())[0]
    assert job.resolved_steps[0].options == (("generator", "herwig"),)
    assert job.resolved_steps[1].options == ()
    assert job.requirements.software == (("Gauss", "v1"), ("Boole", "v2"))


def test_split_run_rejects_other_workflow() -> None:
    with pytest.raises(MismatchedWorkflow):
        split_run(ProductionRun("run-1", "wf-2", 10, 5), _workflow())


def test_run_validation() -> None:
    with pytest.raises(InvalidParameters):
        _run(10, 0)
    with pytest.raises(InvalidParameters):
        _run(0, 10)


def test_workflow_pipeline_check() -> None:
    bad = StepDefinition("Boole", "v2", input_types=frozenset({"raw"}), output_types=frozenset({"digi"}))
    with pytest.raises(InvalidPipeline) as info:
        WorkflowDefinition("", "mc", 1, (gauss_step(), bad))
    assert info.value.step_index == 1
    with pytest.raises(InvalidParameters):
        StepDefinition("Gauss", "v1", output_types=frozenset())


def test_match_job_examples() -> None:
    cap_b = ResourceCapability("siteB", cpu_power=0.9, free_disk_mb=10000)
    assert match_job(JobRequirements(), cap_b)
    assert not match_job(JobRequirements(destination_site="siteA"), cap_b)
    assert not match_job(JobRequirements(min_cpu_power=1.0, min_disk_mb=500), cap_b)
    assert match_job(JobRequirements(destination_site="siteB", min_cpu_power=0.5, min_disk_mb=500), cap_b)


def test_capability_validation() -> None:
    with pytest.raises(InvalidParameters):
        ResourceCapability("A", cpu_power=1.0, free_disk_mb=0, queue_occupancy=1.5)
    with pytest.raises(InvalidParameters):
        ResourceCapability("A", cpu_power=0.0, free_disk_mb=0)


def test_output_datasets_one_per_output_type() -> None:
    job = split_run(_run(100, 100, bytes_per_event=10), _workflow())[0]
    specs = output_datasets(job)
    assert [s.data_type for s in specs] == ["sim", "digi"]
    assert all(s.size_bytes == 1000 for s in specs)
    assert specs[0].lfn == "/pullgrid/run-000001/run-000001.000000/00_Gauss.sim"
