"""
protocol.py
Wire formats spoken between agents and the central services.

* An XML-RPC subset (int, double, string, boolean, array, struct) built on the
  standard ``xmlrpc.client`` marshaller, with deterministic struct ordering,
  a nesting limit and typed decode errors.
* The job, workflow and dataset XML documents, built with ElementTree.
* Struct conversions for the records that travel as RPC values.
"""

import logging
import math
import re
import xml.etree.ElementTree as ET
import xmlrpc.client
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple
from xml.parsers.expat import ExpatError

from components.exceptions import DepthExceeded, MalformedDocument, MissingField, UnsupportedType
from components.model import (
    DatasetDescription,
    DatasetStatus,
    JobDescriptor,
    JobRequirements,
    JobState,
    Replica,
    ResourceCapability,
    StatusMessage,
    StepDefinition,
    WorkflowDefinition,
)

logger = logging.getLogger("protocol")

MAX_DEPTH = 32
INT_MIN, INT_MAX = -(2 ** 31), 2 ** 31 - 1

_METHOD_RE = re.compile(r"^[A-Za-z][A-Za-z0-9_.]*$")
# Characters XML 1.0 cannot carry verbatim; carriage returns would be normalized away.
_BAD_TEXT_RE = re.compile("[^\x09\x0a\x20-\ud7ff\ue000-\ufffd\U00010000-\U0010ffff]")
_DECODE_ERRORS = (
    ExpatError,
    xmlrpc.client.ResponseError,
    ValueError,
    TypeError,
    KeyError,
    IndexError,
    AttributeError,
    OverflowError,
    LookupError,
)


@dataclass(frozen=True)
class RpcCall:
    method: str
    params: Tuple[Any, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple(self.params))


@dataclass(frozen=True)
class RpcReply:
    value: Any = None
    fault: Optional[Tuple[int, str]] = None

    def __post_init__(self):
        if (self.value is None) == (self.fault is None):
            raise UnsupportedType("a reply carries exactly one of value or fault")

    @property
    def is_fault(self) -> bool:
        return self.fault is not None


def _check_text(text: str) -> None:
    if _BAD_TEXT_RE.search(text):
        raise UnsupportedType("string contains characters XML cannot carry")


def _canonical(value: Any) -> Any:
    """Validate an RpcValue and return it with lexicographically ordered structs."""
    # Iterative walk so adversarially deep values cannot exhaust the Python stack.
    root: List[Any] = [None]
    stack = [(value, root, 0, 0)]
    while stack:
        item, parent, slot, depth = stack.pop()
        if isinstance(item, bool):
            out = item
        elif isinstance(item, int):
            if not INT_MIN <= item <= INT_MAX:
                raise UnsupportedType(f"integer {item} outside the 32-bit range")
            out = item
        elif isinstance(item, float):
            if not math.isfinite(item):
                raise UnsupportedType("non-finite doubles are not representable")
            out = item
        elif isinstance(item, str):
            _check_text(item)
            out = item
        elif isinstance(item, (list, tuple)):
            if depth >= MAX_DEPTH:
                raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
            out = [None] * len(item)
            for index, child in enumerate(item):
                stack.append((child, out, index, depth + 1))
        elif isinstance(item, dict):
            if depth >= MAX_DEPTH:
                raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
            out = {}
            keys = sorted(item)
            for key in keys:
                if not isinstance(key, str):
                    raise UnsupportedType("struct keys must be strings")
                _check_text(key)
                out[key] = None
            for key in keys:
                stack.append((item[key], out, key, depth + 1))
        else:
            raise UnsupportedType(f"type {type(item).__name__} is outside the XML-RPC subset")
        parent[slot] = out
    return root[0]


def _check_decoded(value: Any) -> None:
    stack = [(value, 0)]
    while stack:
        item, depth = stack.pop()
        if isinstance(item, bool) or isinstance(item, str):
            continue
        if isinstance(item, int):
            if not INT_MIN <= item <= INT_MAX:
                raise UnsupportedType(f"integer {item} outside the 32-bit range")
            continue
        if isinstance(item, float):
            continue
        if isinstance(item, list):
            if depth >= MAX_DEPTH:
                raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
            stack.extend((child, depth + 1) for child in item)
            continue
        if isinstance(item, dict):
            if depth >= MAX_DEPTH:
                raise DepthExceeded(f"nesting deeper than {MAX_DEPTH}")
            stack.extend((child, depth + 1) for child in item.values())
            continue
        raise UnsupportedType(f"decoded type {type(item).__name__} is outside the XML-RPC subset")


def _reject_type(unmarshaller: xmlrpc.client.Unmarshaller, data: str) -> None:
    raise UnsupportedType("document uses a type outside the XML-RPC subset")


# Element tags outside the subset; namespaced forms such as ex:nil resolve to these
_UNSUPPORTED_TAGS = ("base64", "dateTime.iso8601", "nil")


def _loads(data: bytes) -> Tuple[Tuple[Any, ...], Optional[str]]:
    if not isinstance(data, (bytes, bytearray)):
        raise MalformedDocument("document must be bytes")
    parser, unmarshaller = xmlrpc.client.getparser(use_builtin_types=True)
    unmarshaller.dispatch = {**unmarshaller.dispatch, **{tag: _reject_type for tag in _UNSUPPORTED_TAGS}}
    try:
        parser.feed(bytes(data))
        parser.close()
        return unmarshaller.close(), unmarshaller.getmethodname()
    except (xmlrpc.client.Fault, UnsupportedType):
        raise
    except RecursionError as exc:
        raise DepthExceeded(str(exc))
    except _DECODE_ERRORS as exc:
        raise MalformedDocument(f"{type(exc).__name__}: {exc}")


def encode_call(call: RpcCall) -> bytes:
    if not _METHOD_RE.match(call.method or ""):
        raise MalformedDocument(f"invalid method name '{call.method}'")
    params = tuple(_canonical(list(call.params)))
    return xmlrpc.client.dumps(params, methodname=call.method, encoding="utf-8").encode("utf-8")


def decode_call(data: bytes) -> RpcCall:
    try:
        params, method = _loads(data)
    except xmlrpc.client.Fault:
        raise MalformedDocument("expected a methodCall, got a fault")
    if method is None or not _METHOD_RE.match(method):
        raise MalformedDocument("document is not a methodCall with a valid methodName")
    _check_decoded(list(params))
    return RpcCall(method=method, params=params)


def encode_reply(reply: RpcReply) -> bytes:
    if reply.fault is not None:
        code, message = reply.fault
        if not INT_MIN <= int(code) <= INT_MAX:
            raise UnsupportedType("fault code outside the 32-bit range")
        _check_text(message)
        body = xmlrpc.client.dumps(xmlrpc.client.Fault(int(code), message), methodresponse=True, encoding="utf-8")
    else:
        body = xmlrpc.client.dumps((_canonical(reply.value),), methodresponse=True, encoding="utf-8")
    return body.encode("utf-8")


def decode_reply(data: bytes) -> RpcReply:
    try:
        params, method = _loads(data)
    except xmlrpc.client.Fault as fault:
        code, message = fault.faultCode, fault.faultString
        if isinstance(code, bool) or not isinstance(code, int) or not isinstance(message, str):
            raise MalformedDocument("fault must carry an integer code and a string message")
        return RpcReply(fault=(code, message))
    if method is not None or len(params) != 1:
        raise MalformedDocument("methodResponse must carry exactly one value")
    _check_decoded(params[0])
    return RpcReply(value=params[0])


# --------------------------------------------------------------------------- #
# ElementTree documents
# --------------------------------------------------------------------------- #
def _sub(parent: ET.Element, name: str, text: Any) -> ET.Element:
    element = ET.SubElement(parent, name)
    element.text = str(text)
    return element


def _child(parent: ET.Element, name: str) -> ET.Element:
    element = parent.find(name)
    if element is None:
        raise MissingField(name)
    return element


def _text(parent: ET.Element, name: str) -> str:
    return _child(parent, name).text or ""


def _int(parent: ET.Element, name: str, base: int = 10) -> int:
    try:
        return int(_text(parent, name), base)
    except ValueError:
        raise MalformedDocument(f"field '{name}' is not an integer")


def _float(parent: ET.Element, name: str) -> float:
    try:
        return float(_text(parent, name))
    except ValueError:
        raise MalformedDocument(f"field '{name}' is not a number")


def _parse(data: bytes, root_name: str) -> ET.Element:
    try:
        root = ET.fromstring(data)
    except (ET.ParseError, ValueError, TypeError, LookupError) as exc:
        raise MalformedDocument(f"unparseable {root_name} document: {exc}")
    if root.tag != root_name:
        raise MalformedDocument(f"expected <{root_name}>, found <{root.tag}>")
    return root


def _serialize(root: ET.Element) -> bytes:
    return ET.tostring(root, encoding="utf-8", xml_declaration=True)


def _step_element(parent: ET.Element, step: StepDefinition) -> None:
    element = ET.SubElement(parent, "step")
    _sub(element, "application", step.application)
    _sub(element, "app_version", step.app_version)
    options = ET.SubElement(element, "options")
    for key, value in step.options:
        option = ET.SubElement(options, "option")
        _sub(option, "key", key)
        _sub(option, "value", value)
    for tag in ("input_types", "output_types"):
        types = ET.SubElement(element, tag)
        for data_type in sorted(getattr(step, tag)):
            _sub(types, "type", data_type)


def _step_from(element: ET.Element) -> StepDefinition:
    options = tuple(
        (_text(option, "key"), _text(option, "value")) for option in _child(element, "options").findall("option")
    )
    return StepDefinition(
        application=_text(element, "application"),
        app_version=_text(element, "app_version"),
        options=options,
        input_types=frozenset(t.text or "" for t in _child(element, "input_types").findall("type")),
        output_types=frozenset(t.text or "" for t in _child(element, "output_types").findall("type")),
    )


def _steps_from(parent: ET.Element, name: str) -> Tuple[StepDefinition, ...]:
    return tuple(_step_from(step) for step in _child(parent, name).findall("step"))


def job_to_xml(job: JobDescriptor) -> bytes:
    root = ET.Element("job")
    _sub(root, "job_id", job.job_id)
    _sub(root, "run_id", job.run_id)
    _sub(root, "sequence_index", job.sequence_index)
    _sub(root, "events", job.events)
    _sub(root, "first_event_offset", job.first_event_offset)
    _sub(root, "seconds_per_event", repr(float(job.seconds_per_event)))
    _sub(root, "bytes_per_event", job.bytes_per_event)
    steps = ET.SubElement(root, "resolved_steps")
    for step in job.resolved_steps:
        _step_element(steps, step)
    req = ET.SubElement(root, "requirements")
    if job.requirements.destination_site is not None:
        _sub(req, "destination_site", job.requirements.destination_site)
    _sub(req, "min_cpu_power", repr(float(job.requirements.min_cpu_power)))
    _sub(req, "min_disk_mb", job.requirements.min_disk_mb)
    software = ET.SubElement(req, "software")
    for application, version in job.requirements.software:
        package = ET.SubElement(software, "package")
        _sub(package, "application", application)
        _sub(package, "app_version", version)
    return _serialize(root)


def job_from_xml(data: bytes) -> JobDescriptor:
    root = _parse(data, "job")
    req = _child(root, "requirements")
    destination = req.find("destination_site")
    requirements = JobRequirements(
        destination_site=None if destination is None else (destination.text or ""),
        min_cpu_power=_float(req, "min_cpu_power"),
        min_disk_mb=_int(req, "min_disk_mb"),
        software=tuple(
            (_text(p, "application"), _text(p, "app_version")) for p in _child(req, "software").findall("package")
        ),
    )
    return JobDescriptor(
        job_id=_text(root, "job_id"),
        run_id=_text(root, "run_id"),
        sequence_index=_int(root, "sequence_index"),
        events=_int(root, "events"),
        resolved_steps=_steps_from(root, "resolved_steps"),
        requirements=requirements,
        first_event_offset=_int(root, "first_event_offset"),
        seconds_per_event=_float(root, "seconds_per_event"),
        bytes_per_event=_int(root, "bytes_per_event"),
    )


def workflow_to_xml(workflow: WorkflowDefinition) -> bytes:
    root = ET.Element("workflow")
    _sub(root, "workflow_id", workflow.workflow_id)
    _sub(root, "name", workflow.name)
    _sub(root, "version", workflow.version)
    _sub(root, "created_at", repr(float(workflow.created_at)))
    steps = ET.SubElement(root, "steps")
    for step in workflow.steps:
        _step_element(steps, step)
    return _serialize(root)


def workflow_from_xml(data: bytes) -> WorkflowDefinition:
    root = _parse(data, "workflow")
    # Operators may submit a draft without id, version or timestamp; the service assigns them.
    return WorkflowDefinition(
        workflow_id=root.findtext("workflow_id") or "",
        name=_text(root, "name"),
        version=_int(root, "version") if root.find("version") is not None else 1,
        steps=_steps_from(root, "steps"),
        created_at=_float(root, "created_at") if root.find("created_at") is not None else 0.0,
    )


def dataset_to_xml(dataset: DatasetDescription) -> bytes:
    root = ET.Element("dataset")
    _sub(root, "lfn", dataset.lfn)
    _sub(root, "data_type", dataset.data_type)
    _sub(root, "job_id", dataset.job_id)
    _sub(root, "run_id", dataset.run_id)
    _sub(root, "events", dataset.events)
    _sub(root, "size_bytes", dataset.size_bytes)
    _sub(root, "checksum", f"{dataset.checksum:08x}")
    return _serialize(root)


def dataset_from_xml(data: bytes) -> DatasetDescription:
    root = _parse(data, "dataset")
    checksum = _int(root, "checksum", base=16)
    if not 0 <= checksum <= 0xFFFFFFFF:
        raise MalformedDocument("checksum is not a 32-bit value")
    return DatasetDescription(
        lfn=_text(root, "lfn"),
        data_type=_text(root, "data_type"),
        job_id=_text(root, "job_id"),
        run_id=_text(root, "run_id"),
        events=_int(root, "events"),
        size_bytes=_int(root, "size_bytes"),
        checksum=checksum,
        status=DatasetStatus.PENDING,
    )


# --------------------------------------------------------------------------- #
# Struct conversions
# --------------------------------------------------------------------------- #
def _required(struct: Dict[str, Any], name: str) -> Any:
    if not isinstance(struct, dict):
        raise MalformedDocument("expected a struct")
    if name not in struct:
        raise MissingField(name)
    return struct[name]


def capability_to_struct(cap: ResourceCapability) -> Dict[str, Any]:
    return {
        "site_id": cap.site_id,
        "cpu_power": float(cap.cpu_power),
        "free_disk_mb": str(int(cap.free_disk_mb)),
        "queue_occupancy": float(cap.queue_occupancy),
        "installed_software": [[app, version] for app, version in sorted(cap.installed_software)],
    }


def capability_from_struct(struct: Dict[str, Any]) -> ResourceCapability:
    try:
        return ResourceCapability(
            site_id=str(_required(struct, "site_id")),
            cpu_power=float(_required(struct, "cpu_power")),
            free_disk_mb=int(struct.get("free_disk_mb", 0)),
            queue_occupancy=float(struct.get("queue_occupancy", 0.0)),
            installed_software=frozenset(tuple(pair) for pair in struct.get("installed_software", [])),
        )
    except (TypeError, ValueError) as exc:
        raise MalformedDocument(f"malformed capability: {exc}")


def status_to_struct(msg: StatusMessage) -> Dict[str, Any]:
    struct: Dict[str, Any] = {
        "job_id": msg.job_id,
        "reported_state": msg.reported_state.value,
        "site_id": msg.site_id,
        "timestamp": float(msg.timestamp),
        "note": msg.note,
        "cpu_seconds": float(msg.cpu_seconds),
        "route": msg.route,
    }
    if msg.step_index is not None:
        struct["step_index"] = msg.step_index
    if msg.attempt is not None:
        struct["attempt"] = msg.attempt
    if msg.flags:
        struct["flags"] = list(msg.flags)
    return struct


def status_from_struct(struct: Dict[str, Any]) -> StatusMessage:
    try:
        return StatusMessage(
            job_id=str(_required(struct, "job_id")),
            reported_state=JobState(_required(struct, "reported_state")),
            site_id=str(struct.get("site_id", "")),
            timestamp=float(_required(struct, "timestamp")),
            note=str(struct.get("note", "")),
            step_index=struct.get("step_index"),
            attempt=struct.get("attempt"),
            cpu_seconds=float(struct.get("cpu_seconds", 0.0)),
            route=str(struct.get("route", "direct")),
            flags=tuple(struct.get("flags", [])),
        )
    except (TypeError, ValueError) as exc:
        raise MalformedDocument(f"malformed status message: {exc}")


def replica_to_struct(replica: Replica) -> Dict[str, Any]:
    return {
        "lfn": replica.lfn,
        "storage_element": replica.storage_element,
        "url": replica.url,
        "registered_at": float(replica.registered_at),
        "checksum": f"{replica.checksum:08x}",
    }


def replica_from_struct(struct: Dict[str, Any]) -> Replica:
    try:
        return Replica(
            lfn=str(_required(struct, "lfn")),
            storage_element=str(_required(struct, "storage_element")),
            url=str(struct.get("url", "")),
            registered_at=float(struct.get("registered_at", 0.0)),
            checksum=int(_required(struct, "checksum"), 16),
        )
    except (TypeError, ValueError) as exc:
        raise MalformedDocument(f"malformed replica: {exc}")


def dataset_entry_to_struct(dataset: DatasetDescription, replicas: List[Replica]) -> Dict[str, Any]:
    return {
        "dataset": dataset_to_xml(dataset).decode("utf-8"),
        "status": dataset.status.value,
        "reason": dataset.reason,
        "replicas": [replica_to_struct(r) for r in replicas],
    }


def dataset_entry_from_struct(struct: Dict[str, Any]) -> Tuple[DatasetDescription, List[Replica]]:
    dataset = dataset_from_xml(str(_required(struct, "dataset")).encode("utf-8"))
    try:
        dataset = dataset.with_status(DatasetStatus(struct.get("status", "Pending")), str(struct.get("reason", "")))
    except ValueError as exc:
        raise MalformedDocument(f"unknown dataset status: {exc}")
    return dataset, [replica_from_struct(r) for r in struct.get("replicas", [])]
