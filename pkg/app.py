import argparse
import json
import logging
import sys
import time
import traceback
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from components.exceptions import PullGridError
from components.protocol import workflow_from_xml
from components.scenario import load_scenario, run_scenario
from components.site_simulator import SiteConfig
from metrics.reports import (
    accounting_report,
    datasets_frame,
    plot_cpu_shares,
    render_table,
    run_status_frame,
    site_summary_frame,
)
from services.agent_service import ProductionAgent, open_site_batch, run_agent_loop
from services.config import load_agent_config, load_endpoints, load_rpc_timeout, load_service_config
from services.rpc import ClientBundle, ServiceBundle, start_server
from services.software_repository import build_package

logger = logging.getLogger("pullgrid")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )


def _clients(args: argparse.Namespace) -> ClientBundle:
    overrides = {name: getattr(args, f"{name}_url") for name in ("production", "monitoring", "bookkeeping", "software")}
    return ClientBundle.http(load_endpoints(overrides), timeout=load_rpc_timeout())


def _emit(args: argparse.Namespace, data: Any, text: str) -> None:
    if args.format == "json":
        print(json.dumps(data, indent=2, sort_keys=True, default=str))
    else:
        print(text)


def _pairs(values: Optional[List[str]], flag: str) -> List[List[str]]:
    pairs = []
    for value in values or []:
        if "=" not in value:
            raise PullGridError(f"{flag} expects key=value, got '{value}'")
        pairs.append(value.split("=", 1))
    return pairs


# --------------------------------------------------------------------------- #
# Commands
# --------------------------------------------------------------------------- #
def cmd_workflow_add(args: argparse.Namespace) -> int:
    workflow = workflow_from_xml(Path(args.file).read_bytes())
    workflow_id = _clients(args).production.define_workflow(workflow)
    _emit(args, {"workflow_id": workflow_id}, workflow_id)
    return EXIT_OK


def cmd_run_create(args: argparse.Namespace) -> int:
    run_id, job_count = _clients(args).production.create_run(
        args.workflow,
        args.events,
        args.per_job,
        extra_options=_pairs(args.option, "--option"),
        destination_site=args.dest,
        min_cpu_power=args.min_cpu,
        min_disk_mb=args.min_disk,
        seconds_per_event=args.spe,
        bytes_per_event=args.bpe,
        request_token=args.token,
    )
    _emit(args, {"run_id": run_id, "job_count": job_count}, f"{run_id} {job_count} jobs")
    return EXIT_OK


def cmd_status(args: argparse.Namespace) -> int:
    clients = _clients(args)
    summary = clients.monitoring.site_summary()
    if args.run_id:
        counts = clients.production.run_status(args.run_id)
        data: Dict[str, Any] = {"run_id": args.run_id, "states": {s.value: n for s, n in counts.items()}}
        head = f"Run {args.run_id}\n{render_table(run_status_frame(counts))}"
    else:
        runs = clients.production.list_runs()
        data = {"runs": runs}
        head = "Runs\n" + "\n".join(f"  {r['run_id']}  {r['workflow_id']}  {r['job_count']} jobs" for r in runs) if runs else "Runs\n(none)"
    data["sites"] = summary
    _emit(args, data, f"{head}\n\nSites\n{render_table(site_summary_frame(summary))}")
    return EXIT_OK


def cmd_sites(args: argparse.Namespace) -> int:
    summary = _clients(args).monitoring.site_summary()
    if args.plot:
        plot_cpu_shares(summary, args.plot)
    _emit(args, summary, render_table(site_summary_frame(summary)))
    return EXIT_OK


def cmd_dataset_query(args: argparse.Namespace) -> int:
    criteria = {"run_id": args.run, "data_type": args.type, "status": args.status, "min_events": args.min_events}
    entries = _clients(args).bookkeeping.query_datasets(criteria)
    data = [dict(d.to_record(), replicas=[r.to_record() for r in replicas]) for d, replicas in entries]
    _emit(args, data, render_table(datasets_frame(entries)))
    return EXIT_OK


def _target_lfns(args: argparse.Namespace, clients: ClientBundle) -> List[str]:
    lfns = list(args.lfns or [])
    if args.run:
        lfns += [d.lfn for d, _ in clients.bookkeeping.query_datasets({"run_id": args.run, "status": "Pending"})]
    if not lfns:
        raise PullGridError("no datasets selected")
    return lfns


def cmd_dataset_approve(args: argparse.Namespace) -> int:
    clients = _clients(args)
    results = clients.bookkeeping.approve(_target_lfns(args, clients))
    _emit(args, results, f"approved {len(results)} datasets")
    return EXIT_OK


def cmd_dataset_reject(args: argparse.Namespace) -> int:
    clients = _clients(args)
    results = clients.bookkeeping.reject(_target_lfns(args, clients), args.reason)
    _emit(args, results, f"rejected {len(results)} datasets")
    return EXIT_OK


def cmd_package_publish(args: argparse.Namespace) -> int:
    files: Dict[str, bytes] = {}
    if args.dir:
        root = Path(args.dir)
        files = {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
    deps = [tuple(d.split("/", 1)) for d in args.dep or []]
    if any(len(d) != 2 for d in deps):
        raise PullGridError("--dep expects application/version")
    package = build_package(args.application, args.version, files or None, deps)
    _clients(args).software.publish(package)
    _emit(args, {"application": args.application, "version": args.version, "checksum": f"{package.checksum:08x}"},
          f"published {args.application}/{args.version} ({package.checksum:08x})")
    return EXIT_OK


def cmd_package_list(args: argparse.Namespace) -> int:
    available = _clients(args).software.query_available()
    lines = [
        f"{p['application']}/{p['app_version']}  {p['checksum']:08x}  deps: {' '.join('/'.join(d) for d in p['dependencies']) or '-'}"
        for p in available
    ]
    _emit(args, available, "\n".join(lines) or "(none)")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario.seed = args.seed
    result = run_scenario(scenario, args.work_dir)
    if args.event_log:
        Path(args.event_log).write_text("\n".join(result.event_log) + "\n", encoding="utf-8")
    data = dict(result.accounting, cycles=result.cycles, simulated_seconds=result.finished_at)
    _emit(args, data, accounting_report(result.accounting))
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    config = load_service_config()
    listen = args.listen or config.listen_address
    bundle = ServiceBundle.create(config)
    server = start_server(bundle, listen)
    print(f"serving on {listen}", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        logger.info("Shutting down")
    finally:
        server.shutdown()
        bundle.store.close()
    return EXIT_OK


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pullgrid", description="Production manager tool for a pull-based production system")
    parser.add_argument("--format", choices=["text", "json"], default="text")
    parser.add_argument("--verbose", "-v", action="store_true")
    for name in ("production", "monitoring", "bookkeeping", "software"):
        parser.add_argument(f"--{name}-url", dest=f"{name}_url", help=f"{name} service endpoint")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("workflow-add", help="define a workflow from its XML description")
    p.add_argument("file")
    p.set_defaults(func=cmd_workflow_add)

    p = sub.add_parser("run-create", help="create a production run")
    p.add_argument("--workflow", required=True)
    p.add_argument("--events", type=int, required=True)
    p.add_argument("--per-job", dest="per_job", type=int, required=True)
    p.add_argument("--option", action="append", help="step option override key=value")
    p.add_argument("--dest")
    p.add_argument("--min-cpu", dest="min_cpu", type=float, default=0.0)
    p.add_argument("--min-disk", dest="min_disk", type=int, default=0)
    p.add_argument("--spe", type=float, default=1.0, help="seconds per event")
    p.add_argument("--bpe", type=int, default=1000, help="output bytes per event")
    p.add_argument("--token", help="idempotency token")
    p.set_defaults(func=cmd_run_create)

    p = sub.add_parser("status", help="run status and site summary")
    p.add_argument("run_id", nargs="?")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("sites", help="per-site accounting")
    p.add_argument("--plot", help="write a CPU share chart to this file")
    p.set_defaults(func=cmd_sites)

    p = sub.add_parser("dataset-query", help="search the dataset catalog")
    p.add_argument("--run")
    p.add_argument("--type")
    p.add_argument("--status", choices=["Pending", "Approved", "Rejected"])
    p.add_argument("--min-events", dest="min_events", type=int)
    p.set_defaults(func=cmd_dataset_query)

    for command, func in (("dataset-approve", cmd_dataset_approve), ("dataset-reject", cmd_dataset_reject)):
        p = sub.add_parser(command)
        p.add_argument("lfns", nargs="*")
        p.add_argument("--run", help="select every pending dataset of a run")
        if command == "dataset-reject":
            p.add_argument("--reason", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("package-publish", help="build and publish a software package")
    p.add_argument("application")
    p.add_argument("version")
    p.add_argument("--dir", help="directory whose files form the package")
    p.add_argument("--dep", action="append", help="dependency application/version")
    p.set_defaults(func=cmd_package_publish)

    p = sub.add_parser("package-list", help="list published packages")
    p.set_defaults(func=cmd_package_list)

    p = sub.add_parser("simulate", help="replay a scenario file")
    p.add_argument("scenario")
    p.add_argument("--work-dir", dest="work_dir", default="sim-work")
    p.add_argument("--seed", type=int)
    p.add_argument("--event-log", dest="event_log")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("serve", help="host the central services over HTTP")
    p.add_argument("--listen")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except PullGridError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except Exception:
        logger.error(traceback.format_exc())
        print("error: internal failure, rerun with --verbose for details", file=sys.stderr)
        return EXIT_ERROR


def agent_main(argv: Optional[List[str]] = None) -> int:
    """Entry point of the per-site daemon: ``pullgrid-agent --config <path> [--once]``."""
    load_dotenv()
    parser = argparse.ArgumentParser(prog="pullgrid-agent")
    parser.add_argument("--config", required=True)
    parser.add_argument("--once", action="store_true", help="run a single cycle, as from cron")
    parser.add_argument("--verbose", "-v", action="store_true")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    setup_logging(args.verbose)
    try:
        config = load_agent_config(args.config)
        clients = ClientBundle.http(config.services, timeout=load_rpc_timeout())
        site = SiteConfig(
            config.site_id,
            slot_count=config.slot_count,
            cpu_power=config.cpu_power,
            disk_quota_mb=config.disk_quota_mb,
            shared_area_writable=config.shared_area_writable,
        )
        # Under cron every invocation resumes the batch system the previous one left
        sim, epoch = open_site_batch(config, site, clock=time.time)
        agent = ProductionAgent(config, clients, sim, epoch=epoch)
        reports = run_agent_loop(agent, once=args.once, clock=time.time, sleep=time.sleep, after_cycle=ProductionAgent.save_batch_system)
    except PullGridError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except KeyboardInterrupt:
        return EXIT_OK
    return EXIT_ERROR if reports and reports[-1].errors else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
