"""Controller server: front-end HTTP API, agent-link listener, monitor loop.

The HTTP API speaks the same JSON text documents as the wire protocol.
Errors come back as ``{"error": <class name>, "detail": ...}`` with a
matching status code, so clients can map failures onto typed errors.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

from .controller import Controller, parse_role
from .errors import (
    AgentError,
    AlreadyDownloaded,
    BadCredentials,
    BindFailure,
    DuplicateUser,
    EaasError,
    Expired,
    InvalidTransition,
    InvariantViolation,
    MalformedFrame,
    NodeUnreachable,
    Unauthorized,
    UnknownHandle,
    UnknownMessageType,
    UnknownNode,
)
from .protocol import (
    Ack,
    ContainerState,
    NodeOffer,
    ServiceRequest,
    doc_to_message,
    message_to_doc,
)
from .transport import read_frame, write_frame

log = logging.getLogger(__name__)

SESSION_HEADER = "X-EaaS-Session"
_MAX_HTTP_BODY = 2 * 1024 * 1024

_STATUS = {
    Unauthorized: 403,
    BadCredentials: 401,
    DuplicateUser: 409,
    UnknownNode: 404,
    NodeUnreachable: 503,
    InvalidTransition: 409,
    AgentError: 502,
    UnknownHandle: 404,
    AlreadyDownloaded: 410,
    Expired: 410,
    InvariantViolation: 400,
    MalformedFrame: 400,
    UnknownMessageType: 400,
}

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript",
    ".css": "text/css",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}


def _error_doc(exc: EaasError) -> tuple[int, dict]:
    status = _STATUS.get(type(exc), 500)
    return status, {"error": type(exc).__name__, "detail": str(exc)}


class _ApiHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "eaas"
    # headers and body go out as separate writes; without this, Nagle plus
    # delayed ACK adds ~40 ms to every response and poisons the bench legs
    disable_nagle_algorithm = True

    # set by the server factory
    controller: Controller = None
    ui_dir: Path | None = None

    def log_message(self, fmt, *args):
        log.debug("api: " + fmt, *args)

    # -- plumbing ---------------------------------------------------------------

    def _token(self) -> str | None:
        return self.headers.get(SESSION_HEADER)

    def _read_doc(self) -> dict:
        length = int(self.headers.get("Content-Length") or 0)
        if length > _MAX_HTTP_BODY:
            raise InvariantViolation("request body too large")
        raw = self.rfile.read(length) if length else b""
        if not raw:
            raise MalformedFrame("empty request body")
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, ValueError):
            raise MalformedFrame("request body is not a JSON document") from None
        if not isinstance(doc, dict):
            raise MalformedFrame("request body must be a document")
        return doc

    def _send(self, status: int, payload: dict | bytes,
              content_type: str = "application/json") -> None:
        body = payload if isinstance(payload, bytes) else (
            json.dumps(payload, separators=(",", ":"), sort_keys=True).encode("utf-8")
        )
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self, method: str) -> None:
        url = urlparse(self.path)
        query = {k: v[0] for k, v in parse_qs(url.query).items()}
        try:
            self._route(method, url.path, query)
        except EaasError as exc:
            status, doc = _error_doc(exc)
            self._send(status, doc)
        except Exception:
            log.exception("unhandled API error for %s %s", method, self.path)
            self._send(500, {"error": "Internal", "detail": "internal error"})

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    # -- routes ------------------------------------------------------------------

    def _route(self, method: str, path: str, query: dict) -> None:
        c = self.controller
        if method == "POST" and path == "/login":
            doc = self._read_doc()
            username = str(doc.get("username") or "")
            token = c.authenticate(username, str(doc.get("password") or ""))
            role = c.users[username].role.value
            self._send(200, {"token": token, "role": role})
        elif method == "POST" and path == "/users":
            doc = self._read_doc()
            user = c.register_user(
                str(doc.get("username") or ""),
                str(doc.get("password") or ""),
                parse_role(str(doc.get("role") or "")),
                session_token=self._token(),
            )
            self._send(201, {"username": user.username, "role": user.role.value})
        elif method == "GET" and path == "/nodes":
            self._send(200, {"nodes": c.list_nodes(self._token())})
        elif method == "GET" and path == "/containers":
            state = None
            if "state" in query:
                try:
                    state = ContainerState(query["state"])
                except ValueError:
                    raise InvariantViolation(f"unknown state filter: {query['state']!r}") from None
            docs = c.list_containers(self._token(), state=state, owner=query.get("owner"))
            self._send(200, {"containers": docs})
        elif method == "POST" and path == "/requests":
            doc = self._read_doc()
            doc.setdefault("type", "request")
            msg = doc_to_message(doc)
            if not isinstance(msg, ServiceRequest):
                raise InvariantViolation("body must be a service request")
            fe_ms, _ = c.link_delays.get(msg.action, (0.0, 0.0))
            if fe_ms:
                c.clock.sleep_precise(fe_ms / 2000.0)
            response = c.handle_request(self._token(), msg)
            if fe_ms:
                c.clock.sleep_precise(fe_ms / 2000.0)
            self._send(200, message_to_doc(response))
        elif method == "GET" and path.startswith("/keys/"):
            handle = path[len("/keys/"):]
            data = c.download_key(self._token(), handle)
            self._send(200, data, content_type="application/octet-stream")
        elif method == "GET" and path == "/metrics":
            node_id = query.get("nodeId") or ""
            sample = c.get_metrics(self._token(), node_id)
            if sample is None:
                self._send(404, {"error": "NotFound", "detail": f"no sample for {node_id}"})
            else:
                self._send(200, message_to_doc(sample))
        elif method == "PUT" and path == "/monitor/interval":
            doc = self._read_doc()
            seconds = doc.get("seconds")
            if not isinstance(seconds, (int, float)) or isinstance(seconds, bool):
                raise InvariantViolation("field 'seconds' must be a number")
            c.set_monitor_interval(self._token(), float(seconds))
            self._send(200, {"seconds": c.config.monitor_interval_s})
        elif method == "GET" and path == "/users/active":
            self._send(200, {"users": c.list_active_users(self._token())})
        elif method == "GET" and (path == "/ui" or path.startswith("/ui/")):
            self._serve_static(path)
        else:
            self._send(404, {"error": "NotFound", "detail": f"no route {method} {path}"})

    def _serve_static(self, path: str) -> None:
        if self.ui_dir is None:
            self._send(404, {"error": "NotFound", "detail": "no UI assets configured"})
            return
        rel = path[len("/ui"):].lstrip("/") or "index.html"
        target = (self.ui_dir / rel).resolve()
        if not str(target).startswith(str(self.ui_dir.resolve())) or not target.is_file():
            self._send(404, {"error": "NotFound", "detail": "no such asset"})
            return
        ctype = _CONTENT_TYPES.get(target.suffix, "application/octet-stream")
        self._send(200, target.read_bytes(), content_type=ctype)


class ControllerServer:
    """Binds the agent listener and the HTTP API; runs the monitor loop."""

    def __init__(self, controller: Controller, *, ui_dir: str | Path | None = None,
                 run_monitor: bool = True):
        self.controller = controller
        self.ui_dir = Path(ui_dir) if ui_dir else None
        self.run_monitor = run_monitor
        self._stop = threading.Event()
        self._agent_server: socketserver.ThreadingTCPServer | None = None
        self._http_server: ThreadingHTTPServer | None = None
        self._threads: list[threading.Thread] = []

    @property
    def agent_port(self) -> int:
        return self._agent_server.server_address[1]

    @property
    def api_port(self) -> int:
        return self._http_server.server_address[1]

    def start(self) -> None:
        controller = self.controller
        config = controller.config

        class OfferHandler(socketserver.StreamRequestHandler):
            disable_nagle_algorithm = True

            def handle(self):
                try:
                    msg = read_frame(self.rfile)
                except EaasError as exc:
                    log.debug("dropping bad agent frame: %s", exc)
                    return
                if isinstance(msg, NodeOffer):
                    controller.handle_offer(msg)
                    reply = Ack(ok=True)
                else:
                    reply = Ack(ok=False, detail=f"unexpected message: {type(msg).__name__}")
                try:
                    write_frame(self.connection, reply)
                except OSError:
                    pass

        handler = type("Handler", (_ApiHandler,), {"controller": controller, "ui_dir": self.ui_dir})
        socketserver.ThreadingTCPServer.allow_reuse_address = True
        try:
            self._agent_server = socketserver.ThreadingTCPServer(
                (config.bind_address, config.agent_port), OfferHandler
            )
        except OSError as exc:
            raise BindFailure(f"cannot bind agent port {config.agent_port}: {exc}") from exc
        try:
            self._http_server = ThreadingHTTPServer((config.bind_address, config.api_port), handler)
        except OSError as exc:
            self._agent_server.server_close()
            raise BindFailure(f"cannot bind API port {config.api_port}: {exc}") from exc
        self._agent_server.daemon_threads = True
        self._http_server.daemon_threads = True

        for target in (self._agent_server.serve_forever, self._http_server.serve_forever):
            thread = threading.Thread(target=target, daemon=True)
            thread.start()
            self._threads.append(thread)
        if self.run_monitor:
            monitor = threading.Thread(target=self._monitor_loop, daemon=True)
            monitor.start()
            self._threads.append(monitor)

    def _monitor_loop(self) -> None:
        while not self._stop.wait(self.controller.config.monitor_interval_s):
            try:
                self.controller.poll_metrics_tick()
            except Exception:
                log.exception("monitor tick failed")

    def stop(self) -> None:
        self._stop.set()
        for server in (self._agent_server, self._http_server):
            if server is not None:
                server.shutdown()
                server.server_close()
        self.controller.store.close()
