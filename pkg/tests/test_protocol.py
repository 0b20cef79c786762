import random
import xml.etree.ElementTree as ET
from typing import Any

import pytest

from components.exceptions import DepthExceeded, MalformedDocument, MissingField, PullGridError, UnsupportedType
from components.model import DatasetDescription, DatasetStatus, JobDescriptor, JobRequirements, StepDefinition
from components.protocol import (
    MAX_DEPTH,
    RpcCall,
    RpcReply,
    dataset_from_xml,
    dataset_to_xml,
    decode_call,
    decode_reply,
    encode_call,
    encode_reply,
    job_from_xml,
    job_to_xml,
    workflow_from_xml,
    workflow_to_xml,
)

from conftest import two_step_workflow

ROUND_TRIPS = 10_000
ALPHABET = "abcxyzABC019 _-./<>&'\"\té€𝄞\n"


def _text(rng: random.Random, limit: int = 12) -> str:
    return "".join(rng.choice(ALPHABET) for _ in range(rng.randint(0, limit)))


def _value(rng: random.Random, depth: int = 0) -> Any:
    kind = rng.randrange(6 if depth < 4 else 4)
    if kind == 0:
        return rng.randint(-(2 ** 31), 2 ** 31 - 1)
    if kind == 1:
        return rng.uniform(-1e9, 1e9)
    if kind == 2:
        return _text(rng)
    if kind == 3:
        return rng.random() < 0.5
    if kind == 4:
        return [_value(rng, depth + 1) for _ in range(rng.randint(0, 4))]
    return {_text(rng, 6): _value(rng, depth + 1) for _ in range(rng.randint(0, 4))}


def _job(steps: int = 1, options: int = 0) -> JobDescriptor:
    step_list = []
    for index in range(steps):
        step_list.append(
            StepDefinition(
                application=f"App{index}",
                app_version="v1",
                options=tuple((f"k{n}", f"value {n}") for n in range(options)),
                input_types=frozenset({f"t{index - 1}"}) if index else frozenset(),
                output_types=frozenset({f"t{index}"}),
            )
        )
    return JobDescriptor(
        job_id="run-000001.000003",
        run_id="run-000001",
        sequence_index=3,
        events=250,
        resolved_steps=tuple(step_list),
        requirements=JobRequirements("CERN", 1.25, 500, tuple((s.application, s.app_version) for s in step_list)),
        first_event_offset=750,
        seconds_per_event=0.1,
        bytes_per_event=2048,
    )


def test_call_round_trip_example() -> None:
    call = RpcCall("requestJob", [{"site": "A", "cpu_power": 1.5}])
    assert decode_call(encode_call(call)) == call


def test_encoding_is_deterministic_with_sorted_keys() -> None:
    a = encode_call(RpcCall("m", [{"b": 1, "a": 2}]))
    b = encode_call(RpcCall("m", [{"a": 2, "b": 1}]))
    assert a == b
    assert a.index(b"<name>a</name>") < a.index(b"<name>b</name>")


def test_reply_examples() -> None:
    fault = RpcReply(fault=(404, "no job"))
    assert decode_reply(encode_reply(fault)) == fault
    empty = RpcReply(value=[])
    assert decode_reply(encode_reply(empty)) == empty


def test_randomized_round_trips() -> None:
    rng = random.Random(20031)
    for _ in range(ROUND_TRIPS):
        call = RpcCall("svc.method_" + str(rng.randint(0, 9)), [_value(rng) for _ in range(rng.randint(0, 3))])
        assert decode_call(encode_call(call)) == call
    for _ in range(ROUND_TRIPS):
        if rng.random() < 0.2:
            reply = RpcReply(fault=(rng.randint(1, 999), _text(rng)))
        else:
            reply = RpcReply(value=_value(rng))
        assert decode_reply(encode_reply(reply)) == reply
    for _ in range(ROUND_TRIPS):
        dataset = DatasetDescription(
            lfn="/pullgrid/" + _text(rng).replace("\n", "") + "x",
            data_type=rng.choice(["sim", "digi", "dst"]),
            job_id=f"run-{rng.randint(1, 99):06d}.{rng.randint(0, 999):06d}",
            run_id="run-000001",
            events=rng.randint(1, 10 ** 6),
            size_bytes=rng.randint(0, 10 ** 12),
            checksum=rng.randint(0, 0xFFFFFFFF),
        )
        assert dataset_from_xml(dataset_to_xml(dataset)) == dataset
    for _ in range(ROUND_TRIPS):
        base = _job(steps=rng.randint(1, 3), options=rng.randint(0, 4))
        job = JobDescriptor(
            **{
                **base.__dict__,
                "events": rng.randint(1, 10 ** 6),
                "first_event_offset": rng.randint(0, 10 ** 9),
                "seconds_per_event": rng.uniform(0, 100),
                "requirements": JobRequirements(
                    rng.choice([None, "CERN", _text(rng) + "x"]),
                    rng.uniform(0, 10),
                    rng.randint(0, 10 ** 6),
                    base.requirements.software,
                ),
            }
        )
        assert job_from_xml(job_to_xml(job)) == job


def test_unsupported_values_are_refused() -> None:
    with pytest.raises(UnsupportedType):
        encode_call(RpcCall("m", [2 ** 40]))
    with pytest.raises(UnsupportedType):
        encode_call(RpcCall("m", [b"bytes"]))
    with pytest.raises(UnsupportedType):
        encode_call(RpcCall("m", ["carriage\rreturn"]))
    with pytest.raises(UnsupportedType):
        encode_reply(RpcReply(value=float("nan")))


def test_base64_document_is_unsupported() -> None:
    doc = (
        b"<?xml version='1.0'?><methodCall><methodName>m</methodName><params>"
        b"<param><value><base64>aGVsbG8=</base64></value></param></params></methodCall>"
    )
    with pytest.raises(UnsupportedType):
        decode_call(doc)


def _call_document(value: bytes) -> bytes:
    return (
        b"<?xml version='1.0'?><methodCall><methodName>m</methodName><params>"
        b"<param><value>" + value + b"</value></param></params></methodCall>"
    )


@pytest.mark.parametrize(
    "value",
    [
        b"<nil/>",
        b"<ex:nil xmlns:ex='http://ws.apache.org/xmlrpc/namespaces/extensions'/>",
        b"<dateTime.iso8601>20260101T00:00:00</dateTime.iso8601>",
        b"<array><data><value><base64></base64></value></data></array>",
    ],
)
def test_unsupported_elements_are_rejected(value: bytes) -> None:
    with pytest.raises(UnsupportedType):
        decode_call(_call_document(value))


def test_type_names_inside_strings_are_plain_text() -> None:
    text = "<base64>aGVsbG8=</base64> and <nil/>"
    assert decode_call(encode_call(RpcCall("m", [text]))).params == (text,)
    cdata = _call_document(b"<string><![CDATA[<dateTime.iso8601>now</dateTime.iso8601>]]></string>")
    assert decode_call(cdata).params == ("<dateTime.iso8601>now</dateTime.iso8601>",)
    reply = encode_reply(RpcReply(value={"note": "<ex:nil/>"}))
    assert decode_reply(reply) == RpcReply(value={"note": "<ex:nil/>"})


def test_depth_limit() -> None:
    value: Any = 1
    for _ in range(MAX_DEPTH + 1):
        value = [value]
    with pytest.raises(DepthExceeded):
        encode_call(RpcCall("m", [value]))
    nested = b"<value><array><data>" * 200 + b"<value><int>1</int></value>" + b"</data></array></value>" * 200
    doc = b"<?xml version='1.0'?><methodResponse><params><param>" + nested + b"</param></params></methodResponse>"
    with pytest.raises(DepthExceeded):
        decode_reply(doc)


def test_malformed_documents() -> None:
    with pytest.raises(MalformedDocument):
        decode_call(b"not xml at all")
    with pytest.raises(MalformedDocument):
        decode_call(encode_reply(RpcReply(value=1)))
    with pytest.raises(MalformedDocument):
        encode_call(RpcCall("bad name!", []))


def test_fuzzed_decoding_raises_only_typed_errors() -> None:
    rng = random.Random(7)
    seeds = [
        encode_call(RpcCall("requestJob", [{"site_id": "A", "cpu_power": 1.5, "sw": [["Gauss", "v1"]]}])),
        encode_reply(RpcReply(value={"run_id": "run-000001", "job_count": 4, "ok": True})),
        encode_reply(RpcReply(fault=(401, "UnknownWorkflow: no workflow 'wf-9'"))),
    ]
    for _ in range(3000):
        data = bytearray(rng.choice(seeds))
        for _ in range(rng.randint(1, 4)):
            position = rng.randrange(len(data))
            action = rng.randrange(3)
            if action == 0:
                data[position] = rng.randrange(256)
            elif action == 1:
                del data[position:position + rng.randint(1, 8)]
            else:
                data[position:position] = bytes(rng.randrange(256) for _ in range(rng.randint(1, 4)))
        for decode in (decode_call, decode_reply):
            try:
                decode(bytes(data))
            except PullGridError:
                pass


def test_job_xml_round_trip_preserves_option_order() -> None:
    for job in (_job(), _job(steps=3, options=10)):
        assert job_from_xml(job_to_xml(job)) == job
    decoded = job_from_xml(job_to_xml(_job(steps=3, options=10)))
    assert [k for k, _ in decoded.resolved_steps[2].options] == [f"k{n}" for n in range(10)]


def test_job_xml_missing_requirements() -> None:
    root = ET.fromstring(job_to_xml(_job()))
    root.remove(root.find("requirements"))
    with pytest.raises(MissingField) as info:
        job_from_xml(ET.tostring(root))
    assert info.value.name == "requirements"


def test_job_xml_without_destination() -> None:
    job = _job()
    job = JobDescriptor(**{**job.__dict__, "requirements": JobRequirements(software=job.requirements.software)})
    assert job_from_xml(job_to_xml(job)).requirements.destination_site is None


def test_dataset_wire_form_never_carries_status() -> None:
    dataset = DatasetDescription("/lfn/a", "sim", "j", "r", 5, 0, 0xDEADBEEF, status=DatasetStatus.APPROVED)
    xml = dataset_to_xml(dataset)
    assert b"Approved" not in xml
    parsed = dataset_from_xml(xml)
    assert parsed.status == DatasetStatus.PENDING
    assert parsed.size_bytes == 0 and parsed.checksum == 0xDEADBEEF


def test_workflow_round_trip() -> None:
    workflow = two_step_workflow()
    assert workflow_from_xml(workflow_to_xml(workflow)) == workflow
