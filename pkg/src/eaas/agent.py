"""Edge node agent: announces availability, executes container commands,
answers metrics queries.

The agent owns the authoritative container table for its node.  Every
command is validated against the lifecycle rules *before* any backend call,
commands for one container are serialized, and the agent's identity
(``node_id``) survives restarts via the state directory.
"""

from __future__ import annotations

import json
import logging
import secrets
import socketserver
import threading
from dataclasses import dataclass
from pathlib import Path

import psutil

from .clock import SYSTEM_CLOCK, Clock
from .errors import (
    BindFailure,
    ControllerUnreachable,
    EaasError,
    InvalidTransition,
    NodeUnreachable,
)
from .keys import generate_keypair
from .protocol import (
    Ack,
    Action,
    Command,
    ContainerKind,
    ContainerState,
    Message,
    MetricsSample,
    NodeOffer,
    Outcome,
    RESULT_WIRE_CAP,
    ServiceRequest,
    ServiceResponse,
    next_state,
)
from .runtime import MockBackend, ProcessBackend, RunResult
from .transport import TcpFrameLink, detect_source_ip, read_frame, write_frame

log = logging.getLogger(__name__)

_TERMINAL = {ContainerState.TERMINATED, ContainerState.COMPLETED, ContainerState.FAILED}
_OK = Outcome.OK
_ERR = Outcome.ERROR


@dataclass
class AgentConfig:
    controller_address: str
    controller_port: int
    agent_port: int = 7700
    service: bool = True
    runtime_backend: str = "mock"
    offer_interval_s: int = 30
    state_dir: str | Path | None = None
    launch_timeout_s: float = 120.0
    key_generation_delay_ms: float = 0.0
    advertise_address: str | None = None
    bind_address: str = "0.0.0.0"


@dataclass
class LocalContainer:
    container_id: str
    kind: ContainerKind
    state: ContainerState
    address: str | None = None
    runtime_handle: object | None = None


class EdgeAgent:
    def __init__(
        self,
        config: AgentConfig,
        backend=None,
        *,
        clock: Clock | None = None,
        controller_link=None,
        node_id: str | None = None,
    ):
        self.config = config
        self.clock = clock or SYSTEM_CLOCK
        self.link = controller_link or TcpFrameLink()
        self.state_dir = Path(config.state_dir) if config.state_dir else None
        if self.state_dir:
            self.state_dir.mkdir(parents=True, exist_ok=True)
        if backend is None:
            if config.runtime_backend == "process":
                if self.state_dir is None:
                    raise ValueError("process backend requires state_dir")
                backend = ProcessBackend(self.state_dir)
            else:
                backend = MockBackend()
        self.backend = backend
        self.node_id = node_id or self._resolve_node_id()
        self.advertised_port = config.agent_port
        self.containers: dict[str, LocalContainer] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._table_guard = threading.Lock()
        self._last_metrics_ts = 0
        self._advertise_ip: str | None = config.advertise_address
        self._reconcile()

    # -- identity and persistence -------------------------------------------------

    def _resolve_node_id(self) -> str:
        if self.state_dir:
            id_path = self.state_dir / "node_id"
            if id_path.exists():
                return id_path.read_text().strip()
            node_id = f"node-{secrets.token_hex(6)}"
            id_path.write_text(node_id + "\n")
            return node_id
        return f"node-{secrets.token_hex(6)}"

    def _table_path(self) -> Path | None:
        return self.state_dir / "containers.json" if self.state_dir else None

    def _save_table(self) -> None:
        path = self._table_path()
        if path is None:
            return
        with self._table_guard:  # executes on distinct containers run concurrently
            rows = [
                {
                    "containerId": lc.container_id,
                    "conType": lc.kind.value,
                    "status": lc.state.value,
                    "ip": lc.address,
                }
                for lc in self.containers.values()
            ]
            path.write_text(json.dumps(rows))

    def _reconcile(self) -> None:
        """Rebuild the container table after a restart, trusting the backend."""
        path = self._table_path()
        if path is None or not path.exists():
            return
        for row in json.loads(path.read_text()):
            lc = LocalContainer(
                container_id=row["containerId"],
                kind=ContainerKind(row["conType"]),
                state=ContainerState(row["status"]),
                address=row.get("ip"),
            )
            if lc.state not in _TERMINAL:
                handle = self.backend.lookup(lc.container_id)
                if handle is None:
                    lc.state = ContainerState.FAILED
                elif handle.finished:
                    lc.state = ContainerState.COMPLETED
                    lc.runtime_handle = handle
                else:
                    lc.state = ContainerState.RUNNING if handle.live else ContainerState.STOPPED
                    lc.address = handle.address or lc.address
                    lc.runtime_handle = handle
            self.containers[lc.container_id] = lc
        self._save_table()

    # -- discovery ------------------------------------------------------------------

    def build_offer(self) -> NodeOffer:
        if self._advertise_ip is None:
            self._advertise_ip = detect_source_ip(
                self.config.controller_address, self.config.controller_port
            )
        return NodeOffer(node_id=self.node_id, address=self._advertise_ip, port=self.advertised_port)

    def announce(self) -> bool:
        """Send one offer; returns False without sending when service is off."""
        if not self.config.service:
            return False
        offer = self.build_offer()
        try:
            reply = self.link.call(self.config.controller_address, self.config.controller_port, offer)
        except NodeUnreachable as exc:
            raise ControllerUnreachable(str(exc)) from exc
        if not isinstance(reply, Ack) or not reply.ok:
            raise ControllerUnreachable(f"controller rejected offer: {reply!r}")
        return True

    def announce_loop(self, stop: threading.Event) -> None:
        while not stop.is_set():
            try:
                self.announce()
            except ControllerUnreachable as exc:
                log.warning("offer failed, retrying in %ss: %s", self.config.offer_interval_s, exc)
            stop.wait(self.config.offer_interval_s)

    # -- command execution ------------------------------------------------------------

    def _lock_for(self, container_id: str) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(container_id)
            if lock is None:
                lock = self._locks[container_id] = threading.Lock()
            return lock

    def _timed_op(self, fn):
        """Run one backend operation under the launch timeout, stamping it."""
        box: dict = {}

        def run():
            try:
                box["result"] = fn()
            except BaseException as exc:  # relayed below
                box["error"] = exc

        t0 = self.clock.monotonic_ms()
        worker = threading.Thread(target=run, daemon=True)
        worker.start()
        worker.join(self.config.launch_timeout_s)
        t1 = self.clock.monotonic_ms()
        if worker.is_alive():
            raise _OpTimeout(t0, t1)
        if "error" in box:
            raise _OpFailure(box["error"], t0, t1)
        return box.get("result"), t0, t1

    def execute(self, req: ServiceRequest) -> ServiceResponse:
        with self._lock_for(req.container_id):
            return self._execute_locked(req)

    def _execute_locked(self, req: ServiceRequest) -> ServiceResponse:
        local = self.containers.get(req.container_id)
        if local is not None and local.kind is not req.con_type:
            return self._error(req, "invalid_transition",
                               f"container {req.container_id} is a {local.kind.value} container")
        state = local.state if local is not None else None
        try:
            target = next_state(req.con_type, state, req.action)
        except InvalidTransition as exc:
            return self._error(req, "invalid_transition", str(exc))

        try:
            if req.action is Action.LAUNCH:
                return self._do_launch(req, target)
            handle = local.runtime_handle if local else None
            if req.action is Action.START:
                _, t0, t1 = self._timed_op(lambda: self.backend.start(handle))
            elif req.action is Action.STOP:
                _, t0, t1 = self._timed_op(lambda: self.backend.stop(handle))
            else:
                _, t0, t1 = self._timed_op(lambda: self.backend.destroy(handle))
        except (_OpTimeout, _OpFailure) as exc:
            return self._runtime_failed(req, local, exc)

        local.state = target
        if req.action is Action.TERMINATE:
            local.runtime_handle = None
        self._save_table()
        address = local.address if req.action is Action.START else None
        return ServiceResponse(
            request_id=req.request_id,
            outcome=_OK,
            new_state=target,
            container_address=address,
            op_start_ms=t0,
            op_end_ms=t1,
        )

    def _do_launch(self, req: ServiceRequest, target: ContainerState) -> ServiceResponse:
        try:
            handle, t0, t1 = self._timed_op(
                lambda: self.backend.create_and_start(req.con_type, req.container_id, req.app_image)
            )
            if req.con_type is ContainerKind.APP:
                result, r0, r1 = self._timed_op(lambda: self.backend.run_to_completion(handle))
                t1 = r1  # the app op spans create + run-to-completion
            else:
                result = None
        except (_OpTimeout, _OpFailure) as exc:
            return self._runtime_failed(req, None, exc)

        local = LocalContainer(
            container_id=req.container_id,
            kind=req.con_type,
            state=target,
            address=handle.address,
            runtime_handle=handle,
        )
        self.containers[req.container_id] = local
        self._save_table()

        if req.con_type is ContainerKind.OS:
            # key work happens after the container operation proper, so it is
            # accounted to the controller<->edge leg, not the on-node op
            if self.config.key_generation_delay_ms > 0:
                self.clock.sleep(self.config.key_generation_delay_ms / 1000.0)
            pair = generate_keypair(comment=req.container_id)
            self.backend.install_public_key(handle, pair.public_key)
            return ServiceResponse(
                request_id=req.request_id,
                outcome=_OK,
                new_state=target,
                container_address=handle.address,
                private_key=pair.private_key,
                public_key=pair.public_key,
                key_fingerprint=pair.fingerprint,
                op_start_ms=t0,
                op_end_ms=t1,
            )

        output: RunResult = result
        data, truncated = output.output, output.truncated
        if len(data) > RESULT_WIRE_CAP:
            data, truncated = data[:RESULT_WIRE_CAP], True
        return ServiceResponse(
            request_id=req.request_id,
            outcome=_OK,
            new_state=target,
            app_result=data,
            result_truncated=truncated,
            op_start_ms=t0,
            op_end_ms=t1,
        )

    def _runtime_failed(self, req, local, exc) -> ServiceResponse:
        if isinstance(exc, _OpTimeout):
            detail = f"operation exceeded {self.config.launch_timeout_s}s"
            t0, t1 = exc.t0, exc.t1
        else:
            detail = str(exc.cause)
            t0, t1 = exc.t0, exc.t1
        log.error("runtime failure for %s on %s: %s", req.action.value, req.container_id, detail)
        if local is None:
            local = LocalContainer(req.container_id, req.con_type, ContainerState.FAILED)
        local.state = ContainerState.FAILED
        self.containers[req.container_id] = local
        self._save_table()
        return ServiceResponse(
            request_id=req.request_id,
            outcome=_ERR,
            new_state=ContainerState.FAILED,
            error_kind="runtime_failure",
            error_detail=detail,
            op_start_ms=t0,
            op_end_ms=t1,
        )

    def _error(self, req, kind: str, detail: str) -> ServiceResponse:
        return ServiceResponse(
            request_id=req.request_id, outcome=_ERR, error_kind=kind, error_detail=detail
        )

    # -- metrics -----------------------------------------------------------------------

    def sample_metrics(self) -> MetricsSample:
        backend_up = True
        try:
            node_cpu, node_mem = self.backend.node_stats()
        except EaasError:
            backend_up = False
            node_cpu = _clamp(psutil.cpu_percent(interval=None))
            node_mem = _clamp(psutil.virtual_memory().percent)
        per: list[tuple[str, float, float]] = []
        if backend_up:
            for lc in list(self.containers.values()):
                if lc.runtime_handle is None or lc.state in _TERMINAL:
                    continue
                try:
                    cpu, mem = self.backend.stats(lc.runtime_handle)
                except EaasError:
                    continue
                per.append((lc.container_id, _clamp(cpu), _clamp(mem)))
        ts = max(self.clock.now_ms(), self._last_metrics_ts)
        self._last_metrics_ts = ts
        return MetricsSample(
            node_id=self.node_id,
            timestamp_ms=ts,
            cpu_percent=_clamp(node_cpu),
            mem_percent=_clamp(node_mem),
            per_container=tuple(per),
        )

    # -- framed entry point ---------------------------------------------------------------

    def handle_message(self, msg: Message) -> Message:
        if isinstance(msg, ServiceRequest):
            return self.execute(msg)
        if isinstance(msg, Command) and msg.command == "metrics":
            return self.sample_metrics()
        return Ack(ok=False, detail=f"unexpected message: {type(msg).__name__}")


class _OpTimeout(Exception):
    def __init__(self, t0: float, t1: float):
        self.t0, self.t1 = t0, t1


class _OpFailure(Exception):
    def __init__(self, cause: BaseException, t0: float, t1: float):
        self.cause, self.t0, self.t1 = cause, t0, t1


def _clamp(value: float) -> float:
    return max(0.0, min(100.0, float(value)))


class AgentServer:
    """Runs the agent's command listener and the periodic offer loop."""

    def __init__(self, agent: EdgeAgent):
        self.agent = agent
        self._stop = threading.Event()
        self._server: socketserver.ThreadingTCPServer | None = None
        self._threads: list[threading.Thread] = []

    def start(self, announce: bool = True) -> None:
        agent = self.agent

        class Handler(socketserver.StreamRequestHandler):
            disable_nagle_algorithm = True

            def handle(self):
                try:
                    msg = read_frame(self.rfile)
                except EaasError as exc:
                    log.debug("dropping bad frame: %s", exc)
                    return
                try:
                    reply = agent.handle_message(msg)
                except EaasError as exc:
                    reply = Ack(ok=False, detail=str(exc))
                write_frame(self.connection, reply)

        socketserver.ThreadingTCPServer.allow_reuse_address = True
        try:
            self._server = socketserver.ThreadingTCPServer(
                (agent.config.bind_address, agent.config.agent_port), Handler
            )
        except OSError as exc:
            raise BindFailure(f"cannot bind agent port: {exc}") from exc
        agent.advertised_port = self._server.server_address[1]
        self._server.daemon_threads = True
        serve = threading.Thread(target=self._server.serve_forever, daemon=True)
        serve.start()
        self._threads.append(serve)
        if announce:
            announcer = threading.Thread(target=agent.announce_loop, args=(self._stop,), daemon=True)
            announcer.start()
            self._threads.append(announcer)

    def stop(self) -> None:
        self._stop.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
