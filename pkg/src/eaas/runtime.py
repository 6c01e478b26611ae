"""Pluggable container backends.

``MockBackend`` is a deterministic in-memory stand-in whose operation delays
are calibrated to real single-board-node container timings (launch under a
minute, start/stop under 5 s, terminate ~7 s), which makes it the reference
backend for the bench harness.  ``ProcessBackend`` runs real OS processes as
desk-scale container substitutes.  Both expose the same five operations plus
stats, so the agent test suite runs unmodified against either.
"""

from __future__ import annotations

import json
import random
import shlex
import signal
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from ipaddress import IPv4Address
from pathlib import Path

import psutil

from .clock import SYSTEM_CLOCK, Clock
from .errors import (
    BackendUnavailable,
    ConfigError,
    DuplicateId,
    InjectedFault,
    InvalidHandle,
    SpawnFailure,
    Timeout,
    WorkloadFailure,
    WrongState,
)
from .protocol import ContainerKind

RESULT_CAP_BYTES = 1_048_576

_MOCK_ADDRESS_BASE = int(IPv4Address("172.31.0.0"))
_PROCESS_PORT_BASE = 42_000

_FAIL_OPS = ("launch", "start", "stop", "terminate", "run", "stats")
_DELAY_OPS = ("launch", "start", "stop", "terminate")


@dataclass(frozen=True)
class RuntimeDelays:
    """Per-operation mock delays in milliseconds."""

    launch_ms: int = 55_000
    start_ms: int = 4_000
    stop_ms: int = 4_500
    terminate_ms: int = 7_000

    def __post_init__(self):
        for name in ("launch_ms", "start_ms", "stop_ms", "terminate_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")

    @classmethod
    def fast(cls) -> "RuntimeDelays":
        """Calibrated profile divided by 100, for CI."""
        base = cls()
        return cls(
            launch_ms=base.launch_ms // 100,
            start_ms=base.start_ms // 100,
            stop_ms=base.stop_ms // 100,
            terminate_ms=base.terminate_ms // 100,
        )

    @classmethod
    def zero(cls) -> "RuntimeDelays":
        return cls(0, 0, 0, 0)

    def for_op(self, op: str) -> int:
        return getattr(self, f"{op}_ms")


@dataclass
class RunResult:
    output: bytes
    truncated: bool = False


@dataclass
class BackendHandle:
    """Opaque per-container token; invalid once the container is destroyed."""

    token: str
    container_id: str
    kind: ContainerKind
    live: bool = False
    address: str | None = None
    finished: bool = False


def _cap_output(data: bytes) -> RunResult:
    if len(data) > RESULT_CAP_BYTES:
        return RunResult(data[:RESULT_CAP_BYTES], truncated=True)
    return RunResult(data)


class MockScript:
    """Parsed fault-injection/calibration script for the mock backend.

    Grammar, one directive per line (``#`` comments allowed)::

        delay <launch|start|stop|terminate> <ms>
        stats <container-id> <cpu> <mem>
        fail <op> <container-id>
    """

    def __init__(self):
        self.delay_overrides: dict[str, int] = {}
        self.stats: dict[str, tuple[float, float]] = {}
        self.fails: set[tuple[str, str]] = set()

    @classmethod
    def parse(cls, text: str) -> "MockScript":
        script = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                if parts[0] == "delay" and len(parts) == 3 and parts[1] in _DELAY_OPS:
                    script.delay_overrides[parts[1]] = int(parts[2])
                elif parts[0] == "stats" and len(parts) == 4:
                    script.stats[parts[1]] = (float(parts[2]), float(parts[3]))
                elif parts[0] == "fail" and len(parts) == 3 and parts[1] in _FAIL_OPS:
                    script.fails.add((parts[1], parts[2]))
                else:
                    raise ValueError
            except ValueError:
                raise ConfigError(f"bad mock script directive on line {lineno}: {raw!r}") from None
        return script

    @classmethod
    def load(cls, path: str | Path) -> "MockScript":
        return cls.parse(Path(path).read_text())


class MockBackend:
    """Deterministic in-memory backend.

    Given the same seed and command sequence the event log is byte-identical
    across runs; operation wall time equals the configured delay (within
    scheduling slop) when driven by the real clock.
    """

    def __init__(
        self,
        delays: RuntimeDelays | None = None,
        *,
        clock: Clock | None = None,
        seed: int = 0,
        script: MockScript | None = None,
        node_cpu: float = 0.0,
        node_mem: float = 0.0,
    ):
        self.delays = delays if delays is not None else RuntimeDelays()
        self.clock = clock or SYSTEM_CLOCK
        self.script = script or MockScript()
        if self.script.delay_overrides:
            merged = {op: self.script.delay_overrides.get(op, self.delays.for_op(op)) for op in _DELAY_OPS}
            self.delays = RuntimeDelays(**{f"{op}_ms": ms for op, ms in merged.items()})
        self.node_cpu = node_cpu
        self.node_mem = node_mem
        self.unavailable = False
        self.event_log: list[str] = []
        self._rng = random.Random(seed)
        self._handles: dict[str, BackendHandle] = {}
        self._by_container: dict[str, BackendHandle] = {}
        self._addr_counter = 0
        self._images: dict[str, str] = {}
        self._seq = 0
        self._lock = threading.Lock()

    # -- internals ------------------------------------------------------------

    def _log(self, event: str) -> None:
        self._seq += 1
        self.event_log.append(f"{self._seq:05d} {event}")

    def _check_fault(self, op: str, container_id: str) -> None:
        if (op, container_id) in self.script.fails:
            raise InjectedFault(f"injected fault: {op} {container_id}")

    def _resolve(self, handle: BackendHandle) -> BackendHandle:
        current = self._handles.get(handle.token)
        if current is None:
            raise InvalidHandle(f"handle {handle.token} is not valid")
        return current

    def _next_address(self) -> str:
        self._addr_counter += 1
        return str(IPv4Address(_MOCK_ADDRESS_BASE + self._addr_counter))

    def _wait(self, op: str) -> None:
        self.clock.sleep(self.delays.for_op(op) / 1000.0)

    # -- backend interface ------------------------------------------------------

    def create_and_start(
        self, kind: ContainerKind, container_id: str, image: str | None = None
    ) -> BackendHandle:
        with self._lock:
            if container_id in self._by_container:
                raise DuplicateId(f"container id already known: {container_id}")
            self._check_fault("launch", container_id)
            token = f"h{self._rng.getrandbits(32):08x}"
            handle = BackendHandle(token=token, container_id=container_id, kind=kind, live=True)
            if kind is ContainerKind.OS:
                handle.address = self._next_address()
            else:
                self._images[container_id] = image or ""
            self._handles[token] = handle
            self._by_container[container_id] = handle
            self._log(f"create {kind.value} {container_id} handle={token} addr={handle.address}")
        self._wait("launch")
        return handle

    def start(self, handle: BackendHandle) -> None:
        with self._lock:
            handle = self._resolve(handle)
            self._check_fault("start", handle.container_id)
            if handle.live:
                raise WrongState(f"{handle.container_id} is already running")
            handle.live = True
            self._log(f"start {handle.container_id}")
        self._wait("start")

    def stop(self, handle: BackendHandle) -> None:
        with self._lock:
            handle = self._resolve(handle)
            self._check_fault("stop", handle.container_id)
            if not handle.live:
                raise WrongState(f"{handle.container_id} is not running")
            handle.live = False
            self._log(f"stop {handle.container_id}")
        self._wait("stop")

    def destroy(self, handle: BackendHandle) -> None:
        with self._lock:
            handle = self._resolve(handle)
            self._check_fault("terminate", handle.container_id)
            handle.live = False
            del self._handles[handle.token]
            del self._by_container[handle.container_id]
            self._log(f"destroy {handle.container_id}")
        self._wait("terminate")

    def run_to_completion(self, handle: BackendHandle, input_data: bytes | None = None) -> RunResult:
        with self._lock:
            handle = self._resolve(handle)
            self._check_fault("run", handle.container_id)
            if handle.kind is not ContainerKind.APP:
                raise WrongState("run_to_completion is only valid for app containers")
            image = self._images.get(handle.container_id, "")
            handle.live = False
            handle.finished = True
            self._log(f"run {handle.container_id} image={image}")
        if image.startswith("echo:"):
            return _cap_output(image[len("echo:"):].encode("utf-8"))
        if image == "sum-1-to-100":
            return RunResult(str(sum(range(1, 101))).encode("ascii"))
        if image == "cat" and input_data is not None:
            return _cap_output(input_data)
        if image.startswith("exit:"):
            code = int(image[len("exit:"):])
            if code != 0:
                raise WorkloadFailure(f"workload exited with code {code}")
            return RunResult(b"")
        raise WorkloadFailure(f"unknown mock image: {image!r}")

    def install_public_key(self, handle: BackendHandle, public_key: bytes) -> None:
        with self._lock:
            handle = self._resolve(handle)
            self._log(f"install-key {handle.container_id}")

    def stats(self, handle: BackendHandle) -> tuple[float, float]:
        with self._lock:
            handle = self._resolve(handle)
            self._check_fault("stats", handle.container_id)
            cpu, mem = self.script.stats.get(handle.container_id, (0.0, 0.0))
            if not handle.live:
                cpu = 0.0
            return (cpu, mem)

    def node_stats(self) -> tuple[float, float]:
        if self.unavailable:
            raise BackendUnavailable("mock backend marked unavailable")
        return (self.node_cpu, self.node_mem)

    def set_container_stats(self, container_id: str, cpu: float, mem: float) -> None:
        self.script.stats[container_id] = (cpu, mem)

    def lookup(self, container_id: str) -> BackendHandle | None:
        return self._by_container.get(container_id)

    def live_handles(self) -> list[BackendHandle]:
        return [h for h in self._handles.values() if h.live]


class ProcessBackend:
    """Runs plain OS processes as container stand-ins.

    OS containers map to a long-running stand-in process (restartable, same
    loopback port across stop/start); app containers map to a subprocess whose
    stdout is the workload result.  The process table is persisted under
    ``state_dir`` so a restarted agent can re-derive container states from
    what actually survived.
    """

    STANDIN_IDLE = [sys.executable, "-c", "import time\nwhile True:\n    time.sleep(3600)"]
    STANDIN_SPIN = [sys.executable, "-c", "while True:\n    pass"]

    def __init__(
        self,
        state_dir: str | Path,
        *,
        standin_cmd: list[str] | None = None,
        workload_timeout_s: float = 60.0,
    ):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self._table_path = self.state_dir / "process-containers.json"
        self.standin_cmd = standin_cmd or self.STANDIN_IDLE
        self.workload_timeout_s = workload_timeout_s
        self._lock = threading.Lock()
        self._handles: dict[str, BackendHandle] = {}
        self._by_container: dict[str, BackendHandle] = {}
        self._pids: dict[str, int | None] = {}
        self._images: dict[str, str] = {}
        self._ports: dict[str, int] = {}
        self._procs: dict[str, psutil.Process] = {}
        self._port_counter = 0
        self._load_table()

    # -- persistence -----------------------------------------------------------

    def _save_table(self) -> None:
        rows = []
        for cid, handle in self._by_container.items():
            rows.append(
                {
                    "containerId": cid,
                    "token": handle.token,
                    "kind": handle.kind.value,
                    "pid": self._pids.get(cid),
                    "port": self._ports.get(cid),
                    "image": self._images.get(cid),
                    "live": handle.live,
                    "finished": handle.finished,
                }
            )
        self._table_path.write_text(json.dumps({"portCounter": self._port_counter, "rows": rows}))

    def _load_table(self) -> None:
        if not self._table_path.exists():
            return
        data = json.loads(self._table_path.read_text())
        self._port_counter = data.get("portCounter", 0)
        for row in data.get("rows", []):
            cid = row["containerId"]
            kind = ContainerKind(row["kind"])
            handle = BackendHandle(
                token=row["token"],
                container_id=cid,
                kind=kind,
                live=bool(row.get("live")),
                finished=bool(row.get("finished")),
            )
            pid = row.get("pid")
            if row.get("port") is not None:
                self._ports[cid] = row["port"]
                handle.address = f"127.0.0.1:{row['port']}"
            if row.get("image") is not None:
                self._images[cid] = row["image"]
            # reconcile against what actually survived the restart
            if handle.live:
                handle.live = pid is not None and _pid_running(pid)
            self._pids[cid] = pid if handle.live else None
            self._handles[handle.token] = handle
            self._by_container[cid] = handle

    # -- helpers ----------------------------------------------------------------

    def _resolve(self, handle: BackendHandle) -> BackendHandle:
        current = self._handles.get(handle.token)
        if current is None:
            raise InvalidHandle(f"handle {handle.token} is not valid")
        return current

    def _spawn_standin(self, cid: str) -> None:
        try:
            proc = subprocess.Popen(
                self.standin_cmd,
                stdout=subprocess.DEVNULL,
                stderr=subprocess.DEVNULL,
                start_new_session=True,
            )
        except OSError as exc:
            raise SpawnFailure(f"cannot spawn stand-in for {cid}: {exc}") from exc
        self._pids[cid] = proc.pid

    def _kill_standin(self, cid: str) -> None:
        pid = self._pids.get(cid)
        if pid is None:
            return
        try:
            proc = psutil.Process(pid)
            proc.send_signal(signal.SIGTERM)
            try:
                proc.wait(timeout=3)
            except psutil.TimeoutExpired:
                proc.kill()
                proc.wait(timeout=3)
        except psutil.NoSuchProcess:
            pass
        self._pids[cid] = None
        self._procs.pop(cid, None)

    def _workload_argv(self, image: str) -> list[str]:
        if image.startswith("echo:"):
            text = image[len("echo:"):]
            return [sys.executable, "-c", f"import sys\nsys.stdout.write({text!r})"]
        if image == "sum-1-to-100":
            return [sys.executable, "-c", "print(sum(range(1, 101)), end='')"]
        if image.startswith("cmd:"):
            return ["/bin/sh", "-c", image[len("cmd:"):]]
        return shlex.split(image)

    # -- backend interface --------------------------------------------------------

    def create_and_start(
        self, kind: ContainerKind, container_id: str, image: str | None = None
    ) -> BackendHandle:
        with self._lock:
            if container_id in self._by_container:
                raise DuplicateId(f"container id already known: {container_id}")
            token = f"p{len(self._handles):06d}-{container_id[:16]}"
            handle = BackendHandle(token=token, container_id=container_id, kind=kind)
            if kind is ContainerKind.OS:
                self._port_counter += 1
                port = _PROCESS_PORT_BASE + self._port_counter
                self._ports[container_id] = port
                handle.address = f"127.0.0.1:{port}"
                self._spawn_standin(container_id)
                handle.live = True
            else:
                self._images[container_id] = image or ""
                handle.live = True
            self._handles[token] = handle
            self._by_container[container_id] = handle
            self._save_table()
            return handle

    def start(self, handle: BackendHandle) -> None:
        with self._lock:
            handle = self._resolve(handle)
            if handle.live:
                raise WrongState(f"{handle.container_id} is already running")
            if handle.kind is not ContainerKind.OS:
                raise WrongState("only OS containers restart")
            self._spawn_standin(handle.container_id)
            handle.live = True
            self._save_table()

    def stop(self, handle: BackendHandle) -> None:
        with self._lock:
            handle = self._resolve(handle)
            if not handle.live:
                raise WrongState(f"{handle.container_id} is not running")
            self._kill_standin(handle.container_id)
            handle.live = False
            self._save_table()

    def destroy(self, handle: BackendHandle) -> None:
        with self._lock:
            handle = self._resolve(handle)
            self._kill_standin(handle.container_id)
            handle.live = False
            del self._handles[handle.token]
            del self._by_container[handle.container_id]
            self._save_table()

    def run_to_completion(self, handle: BackendHandle, input_data: bytes | None = None) -> RunResult:
        with self._lock:
            handle = self._resolve(handle)
            if handle.kind is not ContainerKind.APP:
                raise WrongState("run_to_completion is only valid for app containers")
            image = self._images.get(handle.container_id, "")
        argv = self._workload_argv(image)
        try:
            proc = subprocess.run(
                argv,
                input=input_data,
                capture_output=True,
                timeout=self.workload_timeout_s,
            )
        except subprocess.TimeoutExpired:
            raise Timeout(f"workload exceeded {self.workload_timeout_s}s") from None
        except OSError as exc:
            raise SpawnFailure(f"cannot run workload: {exc}") from exc
        finally:
            with self._lock:
                handle.live = False
                handle.finished = True
                self._save_table()
        if proc.returncode != 0:
            detail = proc.stderr.decode("utf-8", "replace").strip()
            raise WorkloadFailure(f"workload exited with code {proc.returncode}: {detail}")
        return _cap_output(proc.stdout)

    def install_public_key(self, handle: BackendHandle, public_key: bytes) -> None:
        handle = self._resolve(handle)
        key_dir = self.state_dir / "containers" / handle.container_id
        key_dir.mkdir(parents=True, exist_ok=True)
        (key_dir / "authorized_keys").write_bytes(public_key)

    def stats(self, handle: BackendHandle) -> tuple[float, float]:
        with self._lock:
            handle = self._resolve(handle)
            pid = self._pids.get(handle.container_id)
        if pid is None or not handle.live:
            return (0.0, 0.0)
        try:
            proc = self._procs.get(handle.container_id)
            if proc is None or proc.pid != pid:
                proc = psutil.Process(pid)
                self._procs[handle.container_id] = proc
                proc.cpu_percent(interval=None)  # prime the sampler
                return (0.0, _clamp(proc.memory_percent()))
            return (_clamp(proc.cpu_percent(interval=None)), _clamp(proc.memory_percent()))
        except psutil.NoSuchProcess:
            return (0.0, 0.0)

    def node_stats(self) -> tuple[float, float]:
        return (_clamp(psutil.cpu_percent(interval=None)), _clamp(psutil.virtual_memory().percent))

    def lookup(self, container_id: str) -> BackendHandle | None:
        return self._by_container.get(container_id)

    def live_handles(self) -> list[BackendHandle]:
        return [h for h in self._handles.values() if h.live]


def _clamp(value: float) -> float:
    return max(0.0, min(100.0, float(value)))


def _pid_running(pid: int) -> bool:
    try:
        return psutil.Process(pid).is_running()
    except psutil.NoSuchProcess:
        return False


def make_backend(name: str, state_dir: str | Path | None = None, **kwargs):
    """Backend factory for CLI/config use: ``mock`` or ``process``."""
    if name == "mock":
        return MockBackend(**kwargs)
    if name == "process":
        if state_dir is None:
            raise ConfigError("process backend requires a state dir")
        return ProcessBackend(state_dir, **kwargs)
    raise ConfigError(f"unknown backend: {name!r}")
