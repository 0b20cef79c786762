import pandas as pd

from components.model import DatasetDescription, JobState, Replica
from metrics.reports import accounting_report, datasets_frame, render_table, run_status_frame, site_summary_frame


def test_empty_tables() -> None:
    assert render_table(site_summary_frame({})) == "(none)"
    assert render_table(datasets_frame([])) == "(none)"
    assert render_table(pd.DataFrame()) == "(none)"


def test_run_status_in_lifecycle_order() -> None:
    frame = run_status_frame({JobState.DONE: 3, JobState.WAITING: 1, "Running": 2})
    assert list(frame["state"]) == ["Waiting", "Running", "Done"]
    assert list(frame["jobs"]) == [1, 2, 3]


def test_site_summary_frame() -> None:
    summary = {
        "RAL": {"queued": 1, "running": 2, "done": 1, "failed": 0, "cpu_seconds": 10.04, "cpu_share": 0.25},
        "CERN": {"queued": 0, "running": 1, "done": 3, "failed": 1, "cpu_seconds": 30.0, "cpu_share": 0.75},
    }
    frame = site_summary_frame(summary)
    assert list(frame["site"]) == ["CERN", "RAL"]
    assert list(frame["cpu_seconds"]) == [30.0, 10.0]


def test_datasets_frame() -> None:
    dataset = DatasetDescription("/pullgrid/r/a.sim", "sim", "r.000000", "r", 100, 2048, 7)
    replicas = [Replica("/pullgrid/r/a.sim", "CERN-CASTOR", "se://CERN-CASTOR/pullgrid/r/a.sim", 1.0, 7)]
    frame = datasets_frame([(dataset, replicas)])
    assert frame.loc[0, "status"] == "Pending"
    assert frame.loc[0, "replicas"] == "CERN-CASTOR"


def test_accounting_report() -> None:
    accounting = {
        "jobs_total": 100,
        "jobs_done": 92,
        "jobs_failed": 8,
        "jobs_unfinished": 0,
        "failed_by_cause": {"app_failure": 2, "site_failure": 6},
        "success_rate": 0.92,
        "reschedules": 4,
        "datasets": 184,
        "datasets_replicated": 184,
        "bytes_stored": 2_500_000_000,
    }
    text = accounting_report(accounting)
    assert "jobs unfinished" not in text
    assert "site_failure" in text and "6.0%" in text
    assert "bytes stored:    2500000000 (2.50 GB)" in text
    assert text.splitlines()[-1] == "success rate:    92.0%"
