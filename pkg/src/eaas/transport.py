"""Framed TCP transport for the agent link.

Every exchange is one frame out, one frame back, connection closed.  The
``FrameLink`` seam lets tests and the fast bench profile swap the sockets for
direct in-process calls without touching controller or agent logic.
"""

from __future__ import annotations

import socket
import threading
from typing import Callable

from .errors import MalformedFrame, NodeUnreachable
from .protocol import MAX_BODY_BYTES, Message, decode_message, encode_message

CONNECT_TIMEOUT_S = 5.0
# must exceed the agent's launch timeout plus calibrated link delays
READ_TIMEOUT_S = 150.0


def write_frame(sock: socket.socket, msg: Message) -> None:
    sock.sendall(encode_message(msg))


def read_frame(rfile) -> Message:
    """Read one frame from a binary file object; raises MalformedFrame on EOF."""
    head = rfile.readline(10)
    if not head:
        raise MalformedFrame("connection closed before frame")
    if not head.endswith(b"\n"):
        raise MalformedFrame("length prefix too long or unterminated")
    length_text = head[:-1]
    if not length_text.isdigit() or int(length_text) > MAX_BODY_BYTES:
        raise MalformedFrame("bad length prefix")
    length = int(length_text)
    body = rfile.read(length)
    if len(body) != length:
        raise MalformedFrame("connection closed mid-frame")
    return decode_message(head + body)


class TcpFrameLink:
    """One-shot request/response exchange over a fresh TCP connection."""

    def __init__(self, connect_timeout: float = CONNECT_TIMEOUT_S, read_timeout: float = READ_TIMEOUT_S):
        self.connect_timeout = connect_timeout
        self.read_timeout = read_timeout

    def call(self, address: str, port: int, msg: Message) -> Message:
        try:
            with socket.create_connection((address, port), timeout=self.connect_timeout) as sock:
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(self.read_timeout)
                write_frame(sock, msg)
                sock.shutdown(socket.SHUT_WR)
                with sock.makefile("rb") as rfile:
                    return read_frame(rfile)
        except (OSError, MalformedFrame) as exc:
            raise NodeUnreachable(f"{address}:{port} unreachable: {exc}") from exc


class LocalFrameLink:
    """In-process frame network: handlers registered per (address, port).

    By default every call still round-trips through the codec so local
    exchanges exercise the same frames as TCP; ``codec=False`` skips that for
    latency-sensitive bench runs where codec cost would pollute the legs.
    """

    def __init__(self, codec: bool = True):
        self._codec = codec
        self._handlers: dict[tuple[str, int], Callable[[Message], Message]] = {}
        self._lock = threading.Lock()

    def register(self, address: str, port: int, handler: Callable[[Message], Message]) -> None:
        with self._lock:
            self._handlers[(address, port)] = handler

    def unregister(self, address: str, port: int) -> None:
        with self._lock:
            self._handlers.pop((address, port), None)

    def call(self, address: str, port: int, msg: Message) -> Message:
        with self._lock:
            handler = self._handlers.get((address, port))
        if handler is None:
            raise NodeUnreachable(f"no in-process handler at {address}:{port}")
        if not self._codec:
            return handler(msg)
        return decode_message(encode_message(handler(decode_message(encode_message(msg)))))


def detect_source_ip(peer_address: str, peer_port: int) -> str:
    """Best local IP for reaching a peer (no traffic is sent)."""
    try:
        with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as probe:
            probe.connect((peer_address, peer_port))
            return probe.getsockname()[0]
    except OSError:
        return "127.0.0.1"
