# reports.py
import logging
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from components.model import DatasetDescription, JobState, Replica  # noqa: E402

logger = logging.getLogger("reports")

STATE_ORDER = [state.value for state in JobState]
SITE_COLUMNS = ["queued", "running", "done", "failed", "cpu_seconds", "cpu_share"]


# --------------------------------------------------------------------------- #
# Tables
# --------------------------------------------------------------------------- #
def run_status_frame(counts: Dict[Any, int]) -> pd.DataFrame:
    """Job counts per state, in lifecycle order; states with no jobs are left out."""
    rows = {JobState(state).value: int(n) for state, n in counts.items()}
    ordered = [(state, rows[state]) for state in STATE_ORDER if state in rows]
    return pd.DataFrame(ordered, columns=["state", "jobs"])


def site_summary_frame(summary: Dict[str, Dict[str, Any]]) -> pd.DataFrame:
    if not summary:
        return pd.DataFrame(columns=["site"] + SITE_COLUMNS)
    df = pd.DataFrame.from_dict(summary, orient="index").reindex(columns=SITE_COLUMNS).fillna(0)
    df.index.name = "site"
    df = df.reset_index().sort_values("site")
    df["cpu_seconds"] = df["cpu_seconds"].round(1)
    df["cpu_share"] = df["cpu_share"].round(3)
    return df


def datasets_frame(entries: List[Tuple[DatasetDescription, List[Replica]]]) -> pd.DataFrame:
    rows = [
        {
            "lfn": d.lfn,
            "type": d.data_type,
            "run": d.run_id,
            "events": d.events,
            "bytes": d.size_bytes,
            "status": d.status.value,
            "replicas": ",".join(r.storage_element for r in replicas) or "-",
        }
        for d, replicas in entries
    ]
    return pd.DataFrame(rows, columns=["lfn", "type", "run", "events", "bytes", "status", "replicas"])


def render_table(df: pd.DataFrame) -> str:
    """Aligned plain-text rendering used by the CLI."""
    if df.empty:
        return "(none)"
    return df.to_string(index=False)


# --------------------------------------------------------------------------- #
# Accounting
# --------------------------------------------------------------------------- #
def accounting_report(accounting: Dict[str, Any]) -> str:
    """Final production report: outcomes, failure classes, datasets and stored volume."""
    lines = [
        f"jobs total:      {accounting['jobs_total']}",
        f"jobs succeeded:  {accounting['jobs_done']}",
        f"jobs failed:     {accounting['jobs_failed']}",
    ]
    if accounting.get("jobs_unfinished"):
        lines.append(f"jobs unfinished: {accounting['jobs_unfinished']}")
    causes = accounting.get("failed_by_cause", {})
    if causes:
        frame = pd.DataFrame(sorted(causes.items()), columns=["cause", "jobs"])
        frame["share"] = (frame["jobs"] / max(1, accounting["jobs_total"])).map(lambda v: f"{v:.1%}")
        lines.append("failures by cause:")
        lines.extend("  " + line for line in frame.to_string(index=False).splitlines())
    lines.append(f"reschedules:     {accounting.get('reschedules', 0)}")
    lines.append(f"datasets:        {accounting['datasets']} ({accounting['datasets_replicated']} replicated)")
    lines.append(f"bytes stored:    {accounting['bytes_stored']} ({accounting['bytes_stored'] / 1e9:.2f} GB)")
    lines.append(f"success rate:    {accounting['success_rate']:.1%}")
    return "\n".join(lines)


# --------------------------------------------------------------------------- #
# Charts
# --------------------------------------------------------------------------- #
def plot_cpu_shares(summary: Dict[str, Dict[str, Any]], path: Union[str, Path]) -> Path:
    """Bar chart of each site's share of the consumed CPU time."""
    df = site_summary_frame(summary)
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4, len(df) * 0.6), 4))
    try:
        ax.bar(df["site"], df["cpu_share"] * 100)
        ax.set_ylabel("CPU share (%)")
        ax.set_title("Consumed CPU per site")
        plt.xticks(rotation=45, ha="right")
        plt.tight_layout()
        fig.savefig(path)
    finally:
        plt.close(fig)
    logger.info(f"CPU share chart written to {path}")
    return path
