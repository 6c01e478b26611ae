"""Wire protocol: message types, framed codec and container lifecycle rules.

Everything the controller, agents, CLI and bench exchange is one of the
message types below, carried as a length-prefixed UTF-8 frame::

    <len>\\n<body>

``len`` is the decimal byte length of ``body`` (at most 1 MiB) and ``body``
is a compact, newline-free JSON document with a top-level ``"type"`` field.
Encoding is canonical (sorted keys, no whitespace), so equal messages always
produce byte-identical frames and ``decode_message(encode_message(m)) == m``.

Messages are frozen value types and safe to share across threads.
"""

from __future__ import annotations

import base64
import ipaddress
import json
from dataclasses import dataclass
from enum import Enum
from typing import Any, Union

from .errors import (
    InvalidTransition,
    InvariantViolation,
    MalformedFrame,
    UnknownMessageType,
)

MAX_BODY_BYTES = 1_048_576
PROTOCOL_VERSION = "1"

#: raw app results larger than this are truncated before framing (base64
#: expansion must keep the body under MAX_BODY_BYTES)
RESULT_WIRE_CAP = 524_288

_MAX_ID_LEN = 64


class ContainerKind(str, Enum):
    OS = "os"
    APP = "app"


class Action(str, Enum):
    LAUNCH = "launch"
    START = "start"
    STOP = "stop"
    TERMINATE = "terminate"


class ContainerState(str, Enum):
    LAUNCHING = "launching"
    RUNNING = "running"
    STOPPED = "stopped"
    TERMINATED = "terminated"
    COMPLETED = "completed"
    FAILED = "failed"


class Outcome(str, Enum):
    OK = "ok"
    ERROR = "error"


#: states no action can ever leave
ABSORBING_STATES = frozenset({ContainerState.TERMINATED, ContainerState.COMPLETED})


@dataclass(frozen=True)
class NodeOffer:
    """An edge node advertising service availability to the controller."""

    node_id: str
    address: str
    port: int


@dataclass(frozen=True)
class ServiceRequest:
    """A user's container action request, forwarded verbatim to the agent."""

    request_id: str
    con_type: ContainerKind
    node_id: str
    action: Action
    container_id: str
    app_image: str | None = None


@dataclass(frozen=True)
class ServiceResponse:
    """Result of a container action.

    The same shape travels agent -> controller and controller -> front-end.
    Key material (``private_key``/``public_key``) appears only on the agent
    link; the controller strips it and hands the front-end a one-time
    ``key_handle`` instead.  The ``*_ms`` fields are single-host monotonic
    stamps used by the bench harness to decompose round trips.
    """

    request_id: str
    outcome: Outcome
    new_state: ContainerState | None = None
    container_address: str | None = None
    key_handle: str | None = None
    app_result: bytes | None = None
    result_truncated: bool = False
    error_kind: str | None = None
    error_detail: str | None = None
    private_key: bytes | None = None
    public_key: bytes | None = None
    key_fingerprint: str | None = None
    op_start_ms: float | None = None
    op_end_ms: float | None = None
    fwd_ms: float | None = None
    recv_ms: float | None = None

    def __repr__(self) -> str:  # never leak key material into logs
        masked = "<redacted>" if self.private_key is not None else None
        return (
            f"ServiceResponse(request_id={self.request_id!r}, outcome={self.outcome.value!r}, "
            f"new_state={self.new_state.value if self.new_state else None!r}, "
            f"key_handle={self.key_handle!r}, private_key={masked}, "
            f"error_detail={self.error_detail!r})"
        )


@dataclass(frozen=True)
class MetricsSample:
    """Node-level CPU/memory figures plus per-container entries."""

    node_id: str
    timestamp_ms: int
    cpu_percent: float
    mem_percent: float
    per_container: tuple[tuple[str, float, float], ...] = ()


@dataclass(frozen=True)
class Command:
    """Controller-issued instruction to an agent (currently only "metrics")."""

    command: str
    request_id: str | None = None


@dataclass(frozen=True)
class Ack:
    ok: bool = True
    detail: str | None = None


Message = Union[NodeOffer, ServiceRequest, ServiceResponse, MetricsSample, Command, Ack]

_COMMANDS = frozenset({"metrics"})


# --- validation ---------------------------------------------------------------

def _check_id(value: Any, what: str) -> str:
    if not isinstance(value, str) or not (1 <= len(value) <= _MAX_ID_LEN):
        raise InvariantViolation(f"{what} must be a string of 1-{_MAX_ID_LEN} characters")
    return value


def _check_ip(value: Any, what: str) -> str:
    if not isinstance(value, str):
        raise InvariantViolation(f"{what} must be an IP address string")
    try:
        ipaddress.ip_address(value)
    except ValueError:
        raise InvariantViolation(f"{what} is not a valid IP literal: {value!r}") from None
    return value


def _check_host_port(value: Any, what: str) -> str:
    # a bare IP literal, or "<ipv4>:<port>" for process-backend containers
    if not isinstance(value, str):
        raise InvariantViolation(f"{what} must be a string")
    try:
        ipaddress.ip_address(value)
        return value
    except ValueError:
        pass
    host, sep, port = value.rpartition(":")
    if sep and port.isdigit():
        return _check_ip(host, what) and value
    raise InvariantViolation(f"{what} is not a valid address: {value!r}")


def _check_port(value: Any) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not (1 <= value <= 65535):
        raise InvariantViolation(f"port out of range: {value!r}")
    return value


def _check_percent(value: Any, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise InvariantViolation(f"{what} must be a number")
    if not (0.0 <= float(value) <= 100.0):
        raise InvariantViolation(f"{what} out of [0,100]: {value!r}")
    return float(value)


def validate_message(msg: Message) -> None:
    """Raise ``InvariantViolation`` unless ``msg`` satisfies its invariants."""
    if isinstance(msg, NodeOffer):
        _check_id(msg.node_id, "node_id")
        _check_ip(msg.address, "address")
        _check_port(msg.port)
    elif isinstance(msg, ServiceRequest):
        _check_id(msg.request_id, "request_id")
        _check_id(msg.node_id, "node_id")
        _check_id(msg.container_id, "container_id")
        if not isinstance(msg.con_type, ContainerKind):
            raise InvariantViolation("con_type must be a ContainerKind")
        if not isinstance(msg.action, Action):
            raise InvariantViolation("action must be an Action")
        needs_image = msg.con_type is ContainerKind.APP and msg.action is Action.LAUNCH
        if needs_image and not msg.app_image:
            raise InvariantViolation("app_image required for app container launch")
        if not needs_image and msg.app_image is not None:
            raise InvariantViolation("app_image only valid for app container launch")
    elif isinstance(msg, ServiceResponse):
        _check_id(msg.request_id, "request_id")
        if not isinstance(msg.outcome, Outcome):
            raise InvariantViolation("outcome must be an Outcome")
        if msg.new_state is not None and not isinstance(msg.new_state, ContainerState):
            raise InvariantViolation("new_state must be a ContainerState")
        if msg.container_address is not None:
            _check_host_port(msg.container_address, "container_address")
        if msg.app_result is not None and len(msg.app_result) > RESULT_WIRE_CAP:
            raise InvariantViolation("app_result exceeds wire cap; truncate before encoding")
    elif isinstance(msg, MetricsSample):
        _check_id(msg.node_id, "node_id")
        if not isinstance(msg.timestamp_ms, int) or msg.timestamp_ms < 0:
            raise InvariantViolation("timestamp_ms must be a non-negative integer")
        _check_percent(msg.cpu_percent, "cpu_percent")
        _check_percent(msg.mem_percent, "mem_percent")
        for entry in msg.per_container:
            if len(entry) != 3:
                raise InvariantViolation("per_container entries are (id, cpu, mem)")
            _check_id(entry[0], "container_id")
            _check_percent(entry[1], "per-container cpu_percent")
            _check_percent(entry[2], "per-container mem_percent")
    elif isinstance(msg, Command):
        if msg.command not in _COMMANDS:
            raise InvariantViolation(f"unknown command: {msg.command!r}")
        if msg.request_id is not None:
            _check_id(msg.request_id, "request_id")
    elif isinstance(msg, Ack):
        if not isinstance(msg.ok, bool):
            raise InvariantViolation("ok must be a boolean")
    else:
        raise InvariantViolation(f"not a protocol message: {type(msg).__name__}")


# --- document conversion --------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _put(doc: dict, key: str, value: Any) -> None:
    if value is not None:
        doc[key] = value


def message_to_doc(msg: Message) -> dict:
    """Validate ``msg`` and render it as a wire document (plain dict)."""
    validate_message(msg)
    doc: dict[str, Any] = {"version": PROTOCOL_VERSION}
    if isinstance(msg, NodeOffer):
        doc.update(type="offer", nodeId=msg.node_id, ip=msg.address, port=msg.port)
    elif isinstance(msg, ServiceRequest):
        doc.update(
            type="request",
            requestId=msg.request_id,
            conType=msg.con_type.value,
            nodeId=msg.node_id,
            action=msg.action.value,
            containerId=msg.container_id,
        )
        _put(doc, "appImage", msg.app_image)
    elif isinstance(msg, ServiceResponse):
        doc.update(type="response", requestId=msg.request_id, outcome=msg.outcome.value)
        _put(doc, "status", msg.new_state.value if msg.new_state else None)
        _put(doc, "ip", msg.container_address)
        _put(doc, "keyHandle", msg.key_handle)
        _put(doc, "result", _b64(msg.app_result) if msg.app_result is not None else None)
        if msg.result_truncated:
            doc["resultTruncated"] = True
        _put(doc, "errorKind", msg.error_kind)
        _put(doc, "errorDetail", msg.error_detail)
        _put(doc, "privateKey", _b64(msg.private_key) if msg.private_key is not None else None)
        _put(doc, "publicKey", _b64(msg.public_key) if msg.public_key is not None else None)
        _put(doc, "fingerprint", msg.key_fingerprint)
        _put(doc, "opStartMs", msg.op_start_ms)
        _put(doc, "opEndMs", msg.op_end_ms)
        _put(doc, "fwdMs", msg.fwd_ms)
        _put(doc, "recvMs", msg.recv_ms)
    elif isinstance(msg, MetricsSample):
        doc.update(
            type="metrics",
            nodeId=msg.node_id,
            timestampMs=msg.timestamp_ms,
            cpuPercent=msg.cpu_percent,
            memPercent=msg.mem_percent,
            perContainer=[
                {"containerId": cid, "cpuPercent": cpu, "memPercent": mem}
                for cid, cpu, mem in msg.per_container
            ],
        )
    elif isinstance(msg, Command):
        doc.update(type="command", command=msg.command)
        _put(doc, "requestId", msg.request_id)
    elif isinstance(msg, Ack):
        doc.update(type="ack", ok=msg.ok)
        _put(doc, "detail", msg.detail)
    return doc


class _Fields:
    """Typed accessors over a decoded document; failures are InvariantViolation."""

    def __init__(self, doc: dict):
        self.doc = doc

    def str_(self, key: str, optional: bool = False) -> Any:
        value = self.doc.get(key)
        if value is None:
            if optional:
                return None
            raise InvariantViolation(f"missing field {key!r}")
        if not isinstance(value, str):
            raise InvariantViolation(f"field {key!r} must be a string")
        return value

    def int_(self, key: str) -> int:
        value = self.doc.get(key)
        if not isinstance(value, int) or isinstance(value, bool):
            raise InvariantViolation(f"field {key!r} must be an integer")
        return value

    def float_(self, key: str, optional: bool = False) -> Any:
        value = self.doc.get(key)
        if value is None and optional:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvariantViolation(f"field {key!r} must be a number")
        return float(value)

    def bytes_(self, key: str) -> bytes | None:
        value = self.str_(key, optional=True)
        if value is None:
            return None
        try:
            return base64.b64decode(value, validate=True)
        except Exception:
            raise InvariantViolation(f"field {key!r} is not valid base64") from None

    def enum(self, key: str, enum_cls: type, optional: bool = False) -> Any:
        value = self.str_(key, optional=optional)
        if value is None:
            return None
        try:
            return enum_cls(value)
        except ValueError:
            raise InvariantViolation(f"field {key!r} has unknown value {value!r}") from None


def doc_to_message(doc: Any) -> Message:
    """Build a typed message from a wire document, validating invariants."""
    if not isinstance(doc, dict):
        raise MalformedFrame("body is not a document")
    if doc.get("version", PROTOCOL_VERSION) != PROTOCOL_VERSION:
        raise MalformedFrame(f"unsupported protocol version: {doc.get('version')!r}")
    msg_type = doc.get("type")
    if not isinstance(msg_type, str):
        raise MalformedFrame("missing type tag")
    f = _Fields(doc)
    if msg_type == "offer":
        msg: Message = NodeOffer(node_id=f.str_("nodeId"), address=f.str_("ip"), port=f.int_("port"))
    elif msg_type == "request":
        msg = ServiceRequest(
            request_id=f.str_("requestId"),
            con_type=f.enum("conType", ContainerKind),
            node_id=f.str_("nodeId"),
            action=f.enum("action", Action),
            container_id=f.str_("containerId"),
            app_image=f.str_("appImage", optional=True),
        )
    elif msg_type == "response":
        msg = ServiceResponse(
            request_id=f.str_("requestId"),
            outcome=f.enum("outcome", Outcome),
            new_state=f.enum("status", ContainerState, optional=True),
            container_address=f.str_("ip", optional=True),
            key_handle=f.str_("keyHandle", optional=True),
            app_result=f.bytes_("result"),
            result_truncated=bool(doc.get("resultTruncated", False)),
            error_kind=f.str_("errorKind", optional=True),
            error_detail=f.str_("errorDetail", optional=True),
            private_key=f.bytes_("privateKey"),
            public_key=f.bytes_("publicKey"),
            key_fingerprint=f.str_("fingerprint", optional=True),
            op_start_ms=f.float_("opStartMs", optional=True),
            op_end_ms=f.float_("opEndMs", optional=True),
            fwd_ms=f.float_("fwdMs", optional=True),
            recv_ms=f.float_("recvMs", optional=True),
        )
    elif msg_type == "metrics":
        entries = doc.get("perContainer", [])
        if not isinstance(entries, list):
            raise InvariantViolation("perContainer must be a list")
        per_container = []
        for entry in entries:
            if not isinstance(entry, dict):
                raise InvariantViolation("perContainer entries must be documents")
            ef = _Fields(entry)
            per_container.append(
                (ef.str_("containerId"), ef.float_("cpuPercent"), ef.float_("memPercent"))
            )
        msg = MetricsSample(
            node_id=f.str_("nodeId"),
            timestamp_ms=f.int_("timestampMs"),
            cpu_percent=f.float_("cpuPercent"),
            mem_percent=f.float_("memPercent"),
            per_container=tuple(per_container),
        )
    elif msg_type == "command":
        msg = Command(command=f.str_("command"), request_id=f.str_("requestId", optional=True))
    elif msg_type == "ack":
        ok = doc.get("ok")
        if not isinstance(ok, bool):
            raise InvariantViolation("field 'ok' must be a boolean")
        msg = Ack(ok=ok, detail=f.str_("detail", optional=True))
    else:
        raise UnknownMessageType(f"unknown message type: {msg_type!r}")
    validate_message(msg)
    return msg


# --- framing --------------------------------------------------------------------

def encode_body(msg: Message) -> str:
    """Canonical newline-free body text for ``msg``."""
    return json.dumps(message_to_doc(msg), separators=(",", ":"), sort_keys=True)


def decode_body(text: str) -> Message:
    """Parse a body document (as used on the HTTP API and in machine output)."""
    try:
        doc = json.loads(text)
    except ValueError:
        raise MalformedFrame("body is not valid JSON") from None
    return doc_to_message(doc)


def encode_message(msg: Message) -> bytes:
    """Encode ``msg`` as one length-prefixed frame."""
    body = encode_body(msg).encode("utf-8")
    if len(body) > MAX_BODY_BYTES:
        raise InvariantViolation(f"encoded body exceeds {MAX_BODY_BYTES} bytes")
    return b"%d\n%s" % (len(body), body)


def decode_message(frame: bytes) -> Message:
    """Decode one frame; raises but never crashes on arbitrary bytes."""
    if not isinstance(frame, (bytes, bytearray)):
        raise MalformedFrame("frame must be bytes")
    head, sep, body = bytes(frame).partition(b"\n")
    if not sep:
        raise MalformedFrame("missing length prefix")
    if not head.isdigit() or len(head) > 8:
        raise MalformedFrame("length prefix is not a decimal byte count")
    length = int(head)
    if head != str(length).encode("ascii"):
        raise MalformedFrame("length prefix is not canonical")
    if length > MAX_BODY_BYTES:
        raise MalformedFrame(f"declared body length {length} exceeds limit")
    if len(body) != length:
        raise MalformedFrame(f"declared length {length} != actual {len(body)}")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError:
        raise MalformedFrame("body is not valid UTF-8") from None
    return decode_body(text)


# --- container lifecycle ----------------------------------------------------------

def next_state(
    kind: ContainerKind, state: ContainerState | None, action: Action
) -> ContainerState:
    """Resolve one lifecycle step; ``state=None`` means the id does not exist yet.

    OS containers launch into ``RUNNING`` and may cycle stop/start before a
    terminate; app containers run to completion on launch and accept nothing
    else.  ``LAUNCHING``/``FAILED`` are operational refinements that no action
    can leave, and ``TERMINATED``/``COMPLETED`` are absorbing.  Every pair not
    listed raises ``InvalidTransition``.
    """
    if kind is ContainerKind.APP:
        if state is None and action is Action.LAUNCH:
            return ContainerState.COMPLETED
    elif state is None:
        if action is Action.LAUNCH:
            return ContainerState.RUNNING
    elif state is ContainerState.RUNNING:
        if action is Action.STOP:
            return ContainerState.STOPPED
        if action is Action.TERMINATE:
            return ContainerState.TERMINATED
    elif state is ContainerState.STOPPED:
        if action is Action.START:
            return ContainerState.RUNNING
        if action is Action.TERMINATE:
            return ContainerState.TERMINATED
    raise InvalidTransition(
        f"{action.value} is invalid for {kind.value} container in state "
        f"{state.value if state else 'absent'}"
    )
