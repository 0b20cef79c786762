from pathlib import Path
from typing import List

import pytest

from components.exceptions import InvalidParameters
from components.model import JobState
from components.scenario import ScenarioResult, failure_cause, load_scenario, parse_scenario, run_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

RESCHEDULE = """
seed 5
poll_interval 60
site A slots=4 submit_fail=1
site B slots=4
package Gauss v1
workflow mc
step Gauss v1 out=sim
run mc events=2000 per_job=100 spe=1
"""

TRANSFERS = """
seed 17
poll_interval 60
max_transfer_attempts 20
site A slots=10 transfer_fail=0.5
package Gauss v1
workflow mc
step Gauss v1 out=sim
run mc events=10000 per_job=100 spe=1
"""

DOUBLE_SEND = """
seed 23
poll_interval 60
auto_approve false
registration_sends 2
site A slots=5 transfer_fail=0.2
package Gauss v1
workflow mc
step Gauss v1 out=sim
run mc events=2000 per_job=100 spe=1
"""

NOISY = """
seed 31
poll_interval 120
site A slots=3 app_fail=0.1 site_fail=0.1 transfer_fail=0.3
site B slots=2 submit_fail=0.3 transfer_fail=0.3
package Geant v4
package Gauss v1 deps=Geant/v4
package Boole v2
workflow mc
step Gauss v1 out=sim
step Boole v2 in=sim out=digi
run mc events=3000 per_job=100 spe=2
"""


def _job_ids(result: ScenarioResult) -> List[str]:
    return [entry["job_id"] for run in result.bundle.production.list_runs() for entry in _jobs(result, run["run_id"])]


def _jobs(result: ScenarioResult, run_id: str) -> List[dict]:
    store = result.bundle.store
    return store.transact(lambda tx: [dict(rec, job_id=key) for key, rec in tx.scan("job_records", prefix=f"{run_id}.")])


def test_parse_scenario() -> None:
    scenario = parse_scenario(NOISY)
    assert scenario.seed == 31 and scenario.poll_interval == 120.0
    assert scenario.sites["A"].slot_count == 3
    assert scenario.sites["A"].failure_policy.site_failure_prob == 0.1
    assert scenario.sites["B"].failure_policy.submission_failure_prob == 0.3
    assert scenario.packages[1] == ("Gauss", "v1", (("Geant", "v4"),))
    assert [s.application for s in scenario.workflows["mc"]] == ["Gauss", "Boole"]
    assert scenario.runs[0].params == {"total_events": 3000, "events_per_job": 100, "seconds_per_event": 2.0}
    # per-site streams differ and are derived from the scenario seed
    seeds = {site.failure_policy.rng_seed for site in scenario.sites.values()}
    assert len(seeds) == 2
    assert parse_scenario(NOISY).sites["A"].failure_policy.rng_seed == scenario.sites["A"].failure_policy.rng_seed


def test_parse_portal_scenario() -> None:
    scenario = load_scenario(SCENARIOS / "portal.scn")
    assert scenario.sites["EDG"].inner_sites == ("EDG-WN1",)
    assert scenario.agent_sites == ["EDG"]
    assert scenario.sites["EDG-WN1"].wn_outbound_connectivity is False


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("seed 1\nteleport A", "line 2"),
        ("site A slots=x", "line 1"),
        ("site A colour=red", "line 1: unknown site key"),
        ("step Gauss v1 out=sim", "line 1: step outside a workflow"),
        ("site A\nsite A", "line 2: site A defined twice"),
        ("portal P", "needs inner"),
        ("portal P inner=W", "unknown inner site W"),
        ("workflow mc\nstep Gauss v1 out=sim\nrun other events=10", "unknown workflow 'other'"),
        ("workflow mc\nstep Gauss v1 out=sim\nrun mc speed=3", "line 3: unknown run key"),
        ("seed", "line 1: 'seed' is missing arguments"),
    ],
)
def test_parse_errors(text: str, fragment: str) -> None:
    with pytest.raises(InvalidParameters) as info:
        parse_scenario(text)
    assert fragment in str(info.value)


def test_missing_scenario_file(tmp_path: Path) -> None:
    with pytest.raises(InvalidParameters):
        load_scenario(tmp_path / "none.scn")


def test_failure_cause() -> None:
    assert failure_cause("site_failure: batch job X ended with site_failure") == "site_failure"
    assert failure_cause("") == "unknown"


@pytest.mark.slow
def test_load_balance_follows_cpu_power(tmp_path: Path) -> None:
    result = run_scenario(load_scenario(SCENARIOS / "load_balance.scn"), tmp_path / "work")
    assert result.accounting["jobs_done"] == 400
    summary = result.clients.monitoring.site_summary()
    ratio = summary["FAST"]["done"] / summary["SLOW"]["done"]
    assert 2.7 <= ratio <= 3.3
    assert summary["FAST"]["cpu_share"] + summary["SLOW"]["cpu_share"] == pytest.approx(1.0)


@pytest.mark.slow
def test_data_challenge_success_rate(tmp_path: Path) -> None:
    result = run_scenario(load_scenario(SCENARIOS / "data_challenge.scn"), tmp_path / "work")
    accounting = result.accounting
    assert accounting["jobs_total"] == 2000
    assert accounting["jobs_unfinished"] == 0
    # terminal classes only: 2% application, 6% site
    assert 0.90 <= accounting["success_rate"] <= 0.94
    assert set(accounting["failed_by_cause"]) <= {"app_failure", "site_failure"}
    assert accounting["reschedules"] == 0
    assert accounting["datasets_replicated"] == 2 * accounting["jobs_done"]


def test_reschedule_across_sites(tmp_path: Path) -> None:
    result = run_scenario(parse_scenario(RESCHEDULE), tmp_path / "work")
    assert result.accounting["jobs_done"] == 20
    touched_a = 0
    for job_id in _job_ids(result):
        sites = {h.site_id for h in result.clients.monitoring.job_history(job_id)}
        _, record = result.bundle.production.get_job(job_id)
        assert record.attempt <= 3
        if "A" in sites:
            touched_a += 1
            assert "B" in sites and record.state == JobState.DONE
            assert "A" in record.excluded_sites
    assert touched_a > 0
    assert result.accounting["reschedules"] == touched_a


def test_transfers_are_retried_until_delivered(tmp_path: Path) -> None:
    result = run_scenario(parse_scenario(TRANSFERS), tmp_path / "work")
    accounting = result.accounting
    assert accounting["jobs_done"] == 100
    assert accounting["datasets"] == 100 and accounting["datasets_replicated"] == 100
    log = result.event_log
    assert any("kind=transfer" in line and line.endswith("failed") for line in log)
    verified = {}
    for index, line in enumerate(log):
        if "kind=verified" in line:
            verified.setdefault(line.split("detail=", 1)[1], index)
        elif "kind=replica" in line:
            detail = line.split("detail=", 1)[1]
            assert detail in verified and verified[detail] < index
    assert sum(1 for line in log if "kind=replica" in line) == 100
    assert all(len(agent.outbox) == 0 for agent in result.agents.values())


def test_double_registration_is_exactly_once(tmp_path: Path) -> None:
    result = run_scenario(parse_scenario(DOUBLE_SEND), tmp_path / "work")
    bookkeeping = result.bundle.bookkeeping
    entries = bookkeeping.query_datasets()
    lfns = [d.lfn for d, _ in entries]
    assert len(lfns) == len(set(lfns)) == 20
    assert all(len(replicas) == 1 for _, replicas in entries)
    assert bookkeeping.counts()["pending"] == 20

    bookkeeping.approve(lfns[:10])
    bookkeeping.reject(lfns[10:], "bad generator settings")
    counts = bookkeeping.counts()
    assert counts["pending"] == 0
    assert counts["approved"] == 10 and counts["rejected"] == 10
    assert len(bookkeeping.query_datasets()) == 20


def test_portal_scenario_relays_everything(tmp_path: Path) -> None:
    result = run_scenario(load_scenario(SCENARIOS / "portal.scn"), tmp_path / "work")
    assert result.accounting["jobs_done"] == 1
    (job_id,) = _job_ids(result)
    history = result.clients.monitoring.job_history(job_id)
    reported = [h for h in history if h.route != "service"]
    assert reported and all(h.route == "relay" and h.site_id == "EDG" for h in reported)


def test_same_seed_gives_identical_event_logs(tmp_path: Path) -> None:
    first = run_scenario(parse_scenario(NOISY), tmp_path / "a")
    second = run_scenario(parse_scenario(NOISY), tmp_path / "b")
    assert first.event_log and first.event_log == second.event_log
    assert first.accounting == second.accounting
    other = run_scenario(parse_scenario(NOISY.replace("seed 31", "seed 32")), tmp_path / "c")
    assert other.event_log != first.event_log


def test_max_cycles_stops_early(tmp_path: Path) -> None:
    result = run_scenario(parse_scenario(TRANSFERS), tmp_path / "work", max_cycles=2)
    assert result.cycles == 2
    assert result.accounting["jobs_unfinished"] > 0
