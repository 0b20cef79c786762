"""
rpc.py
XML-RPC plumbing between agents, the CLI and the central services.

* ServiceEndpoint maps wire method names onto a service object and converts
  arguments and results to and from the XML-RPC subset.
* PullGridServer hosts all four endpoints over HTTP, one path per service.
* RpcClient speaks to an endpoint through a transport: HTTP via ``requests``
  for real deployments, or an in-process loopback that still runs every
  message through the wire codec (used by the simulator and the tests).
* Typed clients (ProductionClient, ...) expose the same method names as the
  service classes, so an agent does not care which side of the wire it is on.
"""

import logging
import threading
import time
import traceback
from collections import Counter
from dataclasses import dataclass
from socketserver import ThreadingMixIn
from typing import Any, Callable, Dict, List, Optional, Protocol, Tuple
from xmlrpc.server import MultiPathXMLRPCServer, SimpleXMLRPCRequestHandler

import requests

from components.exceptions import InvalidParameters, MalformedDocument, PullGridError, ServiceUnreachable, exception_for_fault
from components.model import (
    DatasetDescription,
    JobDescriptor,
    JobState,
    Replica,
    ResourceCapability,
    StatusMessage,
    WorkflowDefinition,
)
from components.protocol import (
    RpcCall,
    RpcReply,
    capability_from_struct,
    capability_to_struct,
    dataset_entry_from_struct,
    dataset_entry_to_struct,
    dataset_to_xml,
    decode_call,
    decode_reply,
    encode_call,
    encode_reply,
    job_from_xml,
    job_to_xml,
    replica_from_struct,
    replica_to_struct,
    status_from_struct,
    status_to_struct,
    workflow_from_xml,
    workflow_to_xml,
)
from services.bookkeeping_service import BookkeepingService
from services.config import SERVICE_PATHS, ServiceConfig
from services.monitoring_service import MonitoringService
from services.production_service import ProductionService
from services.software_repository import Package, SoftwareRepository
from services.store import StoreHandle

logger = logging.getLogger("rpc")


def _fault(err: PullGridError) -> bytes:
    return encode_reply(RpcReply(fault=(err.fault_code, err.to_fault_string())))


def _text(value: Any) -> bytes:
    if not isinstance(value, str):
        raise MalformedDocument("expected an XML document as a string")
    return value.encode("utf-8")


def _optional(value: Any) -> Optional[str]:
    return value if value else None


class ServiceEndpoint:
    """Dispatches decoded calls onto Python callables and encodes the reply."""

    def __init__(self, name: str, methods: Dict[str, Callable[..., Any]]):
        self.name = name
        self.methods = methods

    def handle(self, data: bytes) -> bytes:
        try:
            call = decode_call(data)
        except PullGridError as err:
            logger.warning(f"{self.name}: undecodable request: {err}")
            return _fault(err)
        handler = self.methods.get(call.method)
        if handler is None:
            return _fault(MalformedDocument(f"{self.name} has no method '{call.method}'"))
        try:
            value = handler(*call.params)
            return encode_reply(RpcReply(value=value))
        except PullGridError as err:
            logger.info(f"{self.name}.{call.method} -> {type(err).__name__}: {err}")
            return _fault(err)
        except TypeError as err:
            logger.warning(f"{self.name}.{call.method}: bad arguments: {err}")
            return _fault(MalformedDocument(f"bad arguments for {call.method}: {err}"))
        except ValueError as err:
            # Argument values that do not convert, such as an unknown status name
            logger.warning(f"{self.name}.{call.method}: bad argument value: {err}")
            return _fault(InvalidParameters(f"bad argument value for {call.method}: {err}"))
        except Exception:
            logger.error(f"Error in {self.name}.{call.method}")
            logger.error(traceback.format_exc())
            return _fault(PullGridError(f"internal error in {call.method}"))


# --------------------------------------------------------------------------- #
# Server-side method tables
# --------------------------------------------------------------------------- #
def production_endpoint(svc: ProductionService) -> ServiceEndpoint:
    def create_run(params: Dict[str, Any]) -> Dict[str, Any]:
        if not isinstance(params, dict):
            raise MalformedDocument("createRun expects a struct")
        run_id, job_count = svc.create_run(
            workflow_id=str(params.get("workflow_id", "")),
            total_events=int(params.get("total_events", 0)),
            events_per_job=int(params.get("events_per_job", 0)),
            extra_options=tuple(tuple(pair) for pair in params.get("extra_options", [])),
            destination_site=_optional(params.get("destination_site")),
            min_cpu_power=float(params.get("min_cpu_power", 0.0)),
            min_disk_mb=int(params.get("min_disk_mb", 0)),
            seconds_per_event=float(params.get("seconds_per_event", 1.0)),
            bytes_per_event=int(params.get("bytes_per_event", 1000)),
            request_token=_optional(params.get("request_token")),
        )
        return {"run_id": run_id, "job_count": job_count}

    def request_job(capability: Dict[str, Any]) -> str:
        cap = capability_from_struct(capability)
        job = svc.request_job(cap.site_id, cap)
        return "" if job is None else job_to_xml(job).decode("utf-8")

    def list_runs() -> List[Dict[str, Any]]:
        return [{k: ("" if v is None else v) for k, v in run.items()} for run in svc.list_runs()]

    return ServiceEndpoint(
        "production",
        {
            "defineWorkflow": lambda xml: svc.define_workflow(workflow_from_xml(_text(xml))),
            "getWorkflow": lambda workflow_id: workflow_to_xml(svc.get_workflow(workflow_id)).decode("utf-8"),
            "listWorkflows": lambda: [workflow_to_xml(w).decode("utf-8") for w in svc.list_workflows()],
            "createRun": create_run,
            "requestJob": request_job,
            "rescheduleJob": lambda job_id, reason: svc.reschedule(job_id, reason).value,
            "runStatus": lambda run_id: {state.value: count for state, count in svc.run_status(run_id).items()},
            "listRuns": list_runs,
        },
    )


def monitoring_endpoint(svc: MonitoringService) -> ServiceEndpoint:
    return ServiceEndpoint(
        "monitoring",
        {
            "reportStatus": lambda struct: svc.report_status(status_from_struct(struct)),
            "jobHistory": lambda job_id: [status_to_struct(m) for m in svc.job_history(job_id)],
            "siteSummary": svc.site_summary,
        },
    )


def bookkeeping_endpoint(svc: BookkeepingService) -> ServiceEndpoint:
    return ServiceEndpoint(
        "bookkeeping",
        {
            "registerDataset": lambda xml: svc.register_dataset(_text(xml)),
            "registerDatasets": lambda docs: svc.register_datasets([_text(d) for d in docs]),
            "approveDatasets": lambda lfns: svc.approve(list(lfns)),
            "rejectDatasets": lambda lfns, reason: svc.reject(list(lfns), reason),
            "addReplica": lambda struct: svc.add_replica(replica_from_struct(struct)),
            "queryDatasets": lambda criteria: [dataset_entry_to_struct(d, r) for d, r in svc.query_datasets(criteria)],
            "datasetCounts": svc.counts,
        },
    )


def software_endpoint(svc: SoftwareRepository) -> ServiceEndpoint:
    def query_available() -> List[Dict[str, Any]]:
        return [dict(entry, checksum=f"{entry['checksum']:08x}") for entry in svc.query_available()]

    return ServiceEndpoint(
        "software",
        {
            "publishPackage": lambda struct: svc.publish(Package.from_struct(struct)),
            "fetchPackage": lambda app, version: svc.fetch(app, version).to_struct(),
            "queryAvailable": query_available,
            "resolveDeps": lambda app, version: [list(ref) for ref in svc.resolve_deps(app, version)],
        },
    )


@dataclass
class ServiceBundle:
    """The four central services over one production database."""

    store: StoreHandle
    production: ProductionService
    monitoring: MonitoringService
    bookkeeping: BookkeepingService
    software: SoftwareRepository

    @classmethod
    def create(cls, config: ServiceConfig, store: Optional[StoreHandle] = None, clock: Callable[[], float] = time.time) -> "ServiceBundle":
        store = store if store is not None else StoreHandle.open(config.store_path, fsync=config.fsync)
        return cls(
            store=store,
            production=ProductionService(store, config, clock),
            monitoring=MonitoringService(store),
            bookkeeping=BookkeepingService(store, auto_approve=config.auto_approve),
            software=SoftwareRepository(store, clock),
        )

    def endpoints(self) -> Dict[str, ServiceEndpoint]:
        return {
            "production": production_endpoint(self.production),
            "monitoring": monitoring_endpoint(self.monitoring),
            "bookkeeping": bookkeeping_endpoint(self.bookkeeping),
            "software": software_endpoint(self.software),
        }


# --------------------------------------------------------------------------- #
# HTTP server
# --------------------------------------------------------------------------- #
class _RequestHandler(SimpleXMLRPCRequestHandler):
    rpc_paths = tuple(SERVICE_PATHS.values())

    def log_message(self, format, *args):
        logger.debug(f"{self.address_string()} {format % args}")


class PullGridServer(ThreadingMixIn, MultiPathXMLRPCServer):
    """Serves every endpoint on its own path; each request runs on its own thread."""

    daemon_threads = True

    def __init__(self, address: Tuple[str, int], endpoints: Dict[str, ServiceEndpoint]):
        super().__init__(address, requestHandler=_RequestHandler, logRequests=False, allow_none=False, encoding="utf-8")
        self.routes = {SERVICE_PATHS[name]: endpoint for name, endpoint in endpoints.items()}

    def _marshaled_dispatch(self, data, dispatch_method=None, path=None):
        endpoint = self.routes.get(path)
        if endpoint is None:
            return _fault(MalformedDocument(f"no service at {path}"))
        return endpoint.handle(data)


def start_server(bundle: ServiceBundle, listen_address: str) -> PullGridServer:
    """Start serving in a background thread and return the server."""
    host, port = listen_address.rsplit(":", 1)
    server = PullGridServer((host, int(port)), bundle.endpoints())
    thread = threading.Thread(target=server.serve_forever, name="pullgrid-server", daemon=True)
    thread.start()
    logger.info(f"Serving {', '.join(sorted(SERVICE_PATHS.values()))} on {host}:{server.server_address[1]}")
    return server


# --------------------------------------------------------------------------- #
# Client side
# --------------------------------------------------------------------------- #
class Transport(Protocol):
    def post(self, data: bytes) -> bytes: ...


class HttpTransport:
    def __init__(self, url: str, timeout: float = 30.0, session: Optional[requests.Session] = None):
        self.url = url
        self.timeout = timeout
        self.session = session or requests.Session()
        self.session.headers.update({"Content-Type": "text/xml", "User-Agent": "pullgrid"})

    def post(self, data: bytes) -> bytes:
        try:
            response = self.session.post(self.url, data=data, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ServiceUnreachable(f"{self.url}: {exc}")
        if response.status_code != 200:
            raise ServiceUnreachable(f"{self.url}: HTTP {response.status_code}")
        return response.content


class LoopbackTransport:
    """In-process transport; switching ``online`` off simulates an unreachable service."""

    def __init__(self, endpoint: ServiceEndpoint):
        self.endpoint = endpoint
        self.online = True

    def post(self, data: bytes) -> bytes:
        if not self.online:
            raise ServiceUnreachable(f"{self.endpoint.name} is offline")
        return self.endpoint.handle(data)


class RpcClient:
    def __init__(self, transport: Transport):
        self.transport = transport
        self.calls: Counter = Counter()

    def call(self, method: str, *params: Any) -> Any:
        self.calls[method] += 1
        reply = decode_reply(self.transport.post(encode_call(RpcCall(method, params))))
        if reply.is_fault:
            code, message = reply.fault
            raise exception_for_fault(code, message)
        return reply.value


class ProductionClient:
    def __init__(self, rpc: RpcClient):
        self.rpc = rpc

    def define_workflow(self, workflow: WorkflowDefinition) -> str:
        return self.rpc.call("defineWorkflow", workflow_to_xml(workflow).decode("utf-8"))

    def get_workflow(self, workflow_id: str) -> WorkflowDefinition:
        return workflow_from_xml(self.rpc.call("getWorkflow", workflow_id).encode("utf-8"))

    def create_run(self, workflow_id: str, total_events: int, events_per_job: int, extra_options=(), destination_site=None, **workload) -> Tuple[str, int]:
        params = {
            "workflow_id": workflow_id,
            "total_events": total_events,
            "events_per_job": events_per_job,
            "extra_options": [list(pair) for pair in extra_options],
            "destination_site": destination_site or "",
        }
        params.update({k: v for k, v in workload.items() if v is not None})
        reply = self.rpc.call("createRun", params)
        return reply["run_id"], reply["job_count"]

    def request_job(self, site_id: str, capability: ResourceCapability) -> Optional[JobDescriptor]:
        xml = self.rpc.call("requestJob", capability_to_struct(capability))
        return job_from_xml(xml.encode("utf-8")) if xml else None

    def reschedule(self, job_id: str, reason: str) -> JobState:
        return JobState(self.rpc.call("rescheduleJob", job_id, reason))

    def run_status(self, run_id: str) -> Dict[JobState, int]:
        return {JobState(k): v for k, v in self.rpc.call("runStatus", run_id).items()}

    def list_runs(self) -> List[Dict[str, Any]]:
        return self.rpc.call("listRuns")


class MonitoringClient:
    def __init__(self, rpc: RpcClient):
        self.rpc = rpc

    def report_status(self, msg: StatusMessage) -> bool:
        return self.rpc.call("reportStatus", status_to_struct(msg))

    def job_history(self, job_id: str) -> List[StatusMessage]:
        return [status_from_struct(s) for s in self.rpc.call("jobHistory", job_id)]

    def site_summary(self) -> Dict[str, Dict[str, Any]]:
        return self.rpc.call("siteSummary")


class BookkeepingClient:
    def __init__(self, rpc: RpcClient):
        self.rpc = rpc

    def register_dataset(self, dataset: DatasetDescription) -> bool:
        return self.rpc.call("registerDataset", dataset_to_xml(dataset).decode("utf-8"))

    def approve(self, lfns: List[str]) -> List[Dict[str, str]]:
        return self.rpc.call("approveDatasets", list(lfns))

    def reject(self, lfns: List[str], reason: str) -> List[Dict[str, str]]:
        return self.rpc.call("rejectDatasets", list(lfns), reason)

    def add_replica(self, replica: Replica) -> bool:
        return self.rpc.call("addReplica", replica_to_struct(replica))

    def query_datasets(self, criteria: Optional[Dict[str, Any]] = None) -> List[Tuple[DatasetDescription, List[Replica]]]:
        criteria = {k: v for k, v in (criteria or {}).items() if v is not None}
        return [dataset_entry_from_struct(s) for s in self.rpc.call("queryDatasets", criteria)]

    def counts(self) -> Dict[str, int]:
        return self.rpc.call("datasetCounts")


class SoftwareClient:
    def __init__(self, rpc: RpcClient):
        self.rpc = rpc

    def publish(self, package: Package) -> bool:
        return self.rpc.call("publishPackage", package.to_struct())

    def fetch(self, application: str, version: str) -> Package:
        return Package.from_struct(self.rpc.call("fetchPackage", application, version))

    def query_available(self) -> List[Dict[str, Any]]:
        return [dict(entry, checksum=int(entry["checksum"], 16)) for entry in self.rpc.call("queryAvailable")]

    def resolve_deps(self, application: str, version: str) -> List[Tuple[str, str]]:
        return [tuple(ref) for ref in self.rpc.call("resolveDeps", application, version)]


@dataclass
class ClientBundle:
    production: ProductionClient
    monitoring: MonitoringClient
    bookkeeping: BookkeepingClient
    software: SoftwareClient

    @classmethod
    def over(cls, transports: Dict[str, Transport]) -> "ClientBundle":
        return cls(
            production=ProductionClient(RpcClient(transports["production"])),
            monitoring=MonitoringClient(RpcClient(transports["monitoring"])),
            bookkeeping=BookkeepingClient(RpcClient(transports["bookkeeping"])),
            software=SoftwareClient(RpcClient(transports["software"])),
        )

    @classmethod
    def http(cls, urls: Dict[str, str], timeout: float = 30.0) -> "ClientBundle":
        return cls.over({name: HttpTransport(url, timeout) for name, url in urls.items()})

    @classmethod
    def loopback(cls, bundle: ServiceBundle) -> "ClientBundle":
        return cls.over({name: LoopbackTransport(endpoint) for name, endpoint in bundle.endpoints().items()})

    def transport(self, name: str) -> Transport:
        return getattr(self, name).rpc.transport

    def set_online(self, name: str, online: bool) -> None:
        """Fault injection for loopback bundles."""
        self.transport(name).online = online
