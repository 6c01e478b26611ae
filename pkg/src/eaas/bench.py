"""Benchmark harness: round-trip overhead decomposition, container
scalability, and a synthetic cloud-vs-edge latency/traffic comparison.

Overhead methodology: every request is stamped at four points on one host's
monotonic clock (front-end send/receive, master forward/receive-back, agent
op start/end), which decomposes the round trip into three legs that sum to
the total exactly:

    front-end<->master = total - (master receive-back - master forward)
    master<->edge      = (master receive-back - master forward) - on-node op
    on-node op         = op end - op start

The on-node container operation is excluded from the overhead numerator (it
exists with or without the platform); the denominator is the full round
trip.  Key generation happens on the edge node after the container op, so
its cost lands in the master<->edge leg, which is why launch overhead tops
the other actions.
"""

from __future__ import annotations

import contextlib
import gc
import math
import random
import statistics
import uuid
from dataclasses import dataclass, field

from .agent import AgentConfig, AgentServer, EdgeAgent
from .client import ApiClient
from .clock import SYSTEM_CLOCK
from .controller import Controller, ControllerConfig, Role
from .errors import (
    ConfigError,
    EaasError,
    EnvironmentUnstable,
    InsufficientTrials,
    LaunchFailure,
    Overload,
)
from .httpapi import ControllerServer
from .protocol import (
    Ack,
    Action,
    ContainerKind,
    ContainerState,
    ServiceRequest,
    ServiceResponse,
)
from .runtime import MockBackend, MockScript, RuntimeDelays
from .transport import LocalFrameLink

#: per-action (front-end<->master %, master<->edge %) communication overheads
#: measured on the reference three-node testbed
REFERENCE_OVERHEADS = {
    Action.LAUNCH: (0.54, 5.36),
    Action.START: (0.06, 0.91),
    Action.STOP: (0.07, 1.06),
    Action.TERMINATE: (0.04, 0.64),
}

#: exercising order: a launch leaves the container running, so stop before start
ACTION_ORDER = (Action.LAUNCH, Action.STOP, Action.START, Action.TERMINATE)

#: default injected link delays for scale runs (models the LAN hop; keeps the
#: per-launch overhead spread well above scheduler noise)
SCALE_LINK_MS = (5.0, 20.0)

# synthetic workload model for latency_compare
REQUEST_BYTES = 256
RESPONSE_BYTES = 512
SYNC_BASE_BYTES = 1024
SYNC_PER_USER_BYTES = 64
SERVICE_MS_RANGE = (0.5, 1.5)
MAX_USERS = 4096


def derive_link_delays(
    delays: RuntimeDelays, targets: dict[Action, tuple[float, float]] | None = None
) -> dict[Action, tuple[float, float]]:
    """Solve for injected link delays that reproduce the target percentages.

    With op time T and target percentages (f, m): total = T / (1 - (f+m)/100),
    and each leg is its percentage of that total.
    """
    targets = targets or REFERENCE_OVERHEADS
    out = {}
    for action, (fe_pct, me_pct) in targets.items():
        op_ms = delays.for_op(action.value)
        overall = (fe_pct + me_pct) / 100.0
        if overall >= 1.0:
            raise ConfigError("target overheads must sum below 100%")
        total = op_ms / (1.0 - overall)
        out[action] = (fe_pct / 100.0 * total, me_pct / 100.0 * total)
    return out


@dataclass
class LatencyBreakdown:
    """Median per-action decomposition over a trial set (all legs in ms).

    Medians rather than means: one scheduler-contended trial must not skew
    sub-percent leg targets (fast-profile legs are fractions of a ms).
    """

    action: Action
    t_frontend_master_ms: float
    t_master_edge_ms: float
    t_edge_op_ms: float
    t_total_ms: float
    trials: int
    stddev_total_ms: float


@dataclass
class ActionOverhead:
    fe_master_pct: float
    master_edge_pct: float
    overall_pct: float


@dataclass
class OverheadReport:
    breakdowns: dict[Action, LatencyBreakdown]
    overheads: dict[Action, ActionOverhead]
    rows: list[tuple[Action, float, float, float, float]] = field(default_factory=list)

    def to_doc(self) -> dict:
        return {
            "type": "overheadReport",
            "actions": {
                action.value: {
                    "feMasterPct": round(o.fe_master_pct, 4),
                    "masterEdgePct": round(o.master_edge_pct, 4),
                    "overallPct": round(o.overall_pct, 4),
                    "totalMs": round(self.breakdowns[action].t_total_ms, 3),
                    "stddevTotalMs": round(self.breakdowns[action].stddev_total_ms, 3),
                    "trials": self.breakdowns[action].trials,
                }
                for action, o in self.overheads.items()
            },
        }

    def render(self) -> str:
        lines = [
            f"{'service':<10} {'fe-master%':>10} {'master-edge%':>12} {'overall%':>9} "
            f"{'total ms':>12} {'sd ms':>8}"
        ]
        for action in ACTION_ORDER:
            if action not in self.overheads:
                continue
            o = self.overheads[action]
            b = self.breakdowns[action]
            lines.append(
                f"{action.value:<10} {o.fe_master_pct:>10.2f} {o.master_edge_pct:>12.2f} "
                f"{o.overall_pct:>9.2f} {b.t_total_ms:>12.1f} {b.stddev_total_ms:>8.1f}"
            )
        return "\n".join(lines)

    def data_rows(self) -> list[str]:
        out = ["action,feMs,masterEdgeMs,edgeOpMs,totalMs"]
        for action, fe, me, op, total in self.rows:
            out.append(f"{action.value},{fe:.3f},{me:.3f},{op:.3f},{total:.3f}")
        return out


class BenchStack:
    """A complete controller + one mock-backed agent, owned by the bench run.

    ``transport="tcp"`` runs the real loopback stack (HTTP front-end, framed
    TCP agent link); ``transport="local"`` swaps both hops for in-process
    calls so that sub-millisecond target legs are not swamped by socket cost.
    """

    def __init__(
        self,
        *,
        delays: RuntimeDelays,
        link_delays: dict[Action, tuple[float, float]] | None = None,
        transport: str = "tcp",
        keygen_ms: float = 0.0,
        script: MockScript | None = None,
        seed: int = 0,
    ):
        if transport not in ("tcp", "local"):
            raise ConfigError(f"unknown bench transport: {transport!r}")
        self.transport = transport
        self.delays = delays
        self.link_delays = link_delays or {}
        self.keygen_ms = keygen_ms
        self.script = script
        self.seed = seed
        self.clock = SYSTEM_CLOCK
        self.backend: MockBackend | None = None
        self.agent: EdgeAgent | None = None
        self.node_id = "bench-node"
        self._controller: Controller | None = None
        self._server: ControllerServer | None = None
        self._agent_server: AgentServer | None = None
        self._client: ApiClient | None = None
        self._token: str | None = None

    def __enter__(self) -> "BenchStack":
        self.backend = MockBackend(self.delays, seed=self.seed, script=self.script)
        if self.transport == "tcp":
            self._start_tcp()
        else:
            self._start_local()
        return self

    def __exit__(self, *exc_info) -> None:
        if self._client is not None:
            self._client.close()
        if self._agent_server is not None:
            self._agent_server.stop()
        if self._server is not None:
            self._server.stop()

    def _agent_config(self, controller_port: int, offer_interval_s: int) -> AgentConfig:
        return AgentConfig(
            controller_address="127.0.0.1",
            controller_port=controller_port,
            agent_port=0,
            offer_interval_s=offer_interval_s,
            key_generation_delay_ms=self.keygen_ms,
            advertise_address="127.0.0.1",
            bind_address="127.0.0.1",
        )

    def _start_tcp(self) -> None:
        config = ControllerConfig(bind_address="127.0.0.1", agent_port=0, api_port=0)
        self._controller = Controller(config, link_delays=self.link_delays)
        self._server = ControllerServer(self._controller, run_monitor=False)
        self._server.start()
        # calibrated launches run close to a minute, so the usual 30 s offer
        # heartbeats must keep the node alive through a trial
        agent_config = self._agent_config(self._server.agent_port, offer_interval_s=30)
        agent_config.agent_port = 0
        self.agent = EdgeAgent(agent_config, self.backend, node_id=self.node_id)
        self._agent_server = AgentServer(self.agent)
        self._agent_server.start(announce=True)
        self.agent.announce()
        self._controller.register_user("bench-admin", "bench-pass", Role.ADMINISTRATOR)
        self._client = ApiClient(f"http://127.0.0.1:{self._server.api_port}")
        self._client.login("bench-admin", "bench-pass")

    def _start_local(self) -> None:
        network = LocalFrameLink(codec=False)
        config = ControllerConfig(bind_address="127.0.0.1")
        self._controller = Controller(config, agent_link=network, link_delays=self.link_delays)
        # fast-profile runs finish well inside the liveness window; one offer is enough
        agent_config = self._agent_config(controller_port=1, offer_interval_s=3600)
        agent_config.agent_port = 7700
        self.agent = EdgeAgent(
            agent_config, self.backend, controller_link=network, node_id=self.node_id
        )
        self.agent.advertised_port = 7700
        network.register("127.0.0.1", 7700, self.agent.handle_message)

        controller = self._controller

        def offer_handler(msg):
            controller.handle_offer(msg)
            return Ack(ok=True)

        network.register("127.0.0.1", 1, offer_handler)
        self.agent.announce()
        self._controller.register_user("bench-admin", "bench-pass", Role.ADMINISTRATOR)
        self._token = self._controller.authenticate("bench-admin", "bench-pass")

    # -- request path ------------------------------------------------------------------

    def submit(self, req: ServiceRequest) -> tuple[ServiceResponse, float, float]:
        """Send one request as the front-end; returns (response, t0_ms, t6_ms)."""
        if self.transport == "tcp":
            t0 = self.clock.monotonic_ms()
            response = self._client.request(req)
            t6 = self.clock.monotonic_ms()
            return response, t0, t6
        fe_ms, _ = self.link_delays.get(req.action, (0.0, 0.0))
        t0 = self.clock.monotonic_ms()
        if fe_ms:
            self.clock.sleep_precise(fe_ms / 2000.0)
        response = self._controller.handle_request(self._token, req)
        if fe_ms:
            self.clock.sleep_precise(fe_ms / 2000.0)
        t6 = self.clock.monotonic_ms()
        return response, t0, t6

    def containers(self, state: ContainerState | None = None) -> list[dict]:
        if self.transport == "tcp":
            return self._client.containers(state=state)
        return self._controller.list_containers(self._token, state=state)


@contextlib.contextmanager
def _gc_paused():
    """Collect once, then keep the collector out of the timed loop.

    A generational collection pause inside a trial shows up as tens of ms on
    one leg, which is fatal to sub-percent targets and max-vs-median checks.
    """
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def _decompose(response: ServiceResponse, t0: float, t6: float) -> tuple[float, float, float, float]:
    """Split one round trip into (fe<->master, master<->edge, on-node, total)."""
    if None in (response.fwd_ms, response.recv_ms, response.op_start_ms, response.op_end_ms):
        raise EaasError("response is missing bench stamps")
    total = t6 - t0
    master_span = response.recv_ms - response.fwd_ms
    op = response.op_end_ms - response.op_start_ms
    return total - master_span, master_span - op, op, total


def measure_overheads(
    n_trials: int,
    delays: RuntimeDelays,
    *,
    link_delays: dict[Action, tuple[float, float]] | None = None,
    transport: str = "tcp",
    keygen_ms: float = 0.0,
    stack: BenchStack | None = None,
) -> OverheadReport:
    """Run ``n_trials`` full lifecycles and decompose every leg.

    Per-action overhead percentages use the median communication legs over
    the median total; the on-node op never enters the numerator.
    """
    if n_trials < 5:
        raise InsufficientTrials(f"need at least 5 trials, got {n_trials}")
    if link_delays is None:
        link_delays = derive_link_delays(delays)

    own_stack = stack is None
    if own_stack:
        stack = BenchStack(
            delays=delays, link_delays=link_delays, transport=transport, keygen_ms=keygen_ms
        )
        stack.__enter__()
    try:
        rows: list[tuple[Action, float, float, float, float]] = []
        with _gc_paused():
            for trial in range(n_trials):
                cid = f"bench-{uuid.uuid4().hex[:8]}-{trial}"
                for action in ACTION_ORDER:
                    req = ServiceRequest(
                        request_id=uuid.uuid4().hex,
                        con_type=ContainerKind.OS,
                        node_id=stack.node_id,
                        action=action,
                        container_id=cid,
                    )
                    response, t0, t6 = stack.submit(req)
                    fe, me, op, total = _decompose(response, t0, t6)
                    rows.append((action, fe, me, op, total))
    finally:
        if own_stack:
            stack.__exit__(None, None, None)

    breakdowns: dict[Action, LatencyBreakdown] = {}
    overheads: dict[Action, ActionOverhead] = {}
    for action in ACTION_ORDER:
        series = [row for row in rows if row[0] is action]
        totals = [row[4] for row in series]
        mean_total = statistics.fmean(totals)
        stddev = statistics.stdev(totals) if len(totals) > 1 else 0.0
        if mean_total > 0 and stddev > 0.5 * mean_total:
            raise EnvironmentUnstable(
                f"{action.value}: stddev {stddev:.1f}ms exceeds 50% of mean {mean_total:.1f}ms"
            )
        med_total = statistics.median(totals)
        med_fe = statistics.median(row[1] for row in series)
        med_me = statistics.median(row[2] for row in series)
        med_op = statistics.median(row[3] for row in series)
        breakdowns[action] = LatencyBreakdown(
            action=action,
            t_frontend_master_ms=med_fe,
            t_master_edge_ms=med_me,
            t_edge_op_ms=med_op,
            t_total_ms=med_total,
            trials=len(series),
            stddev_total_ms=stddev,
        )
        fe_pct = 100.0 * med_fe / med_total
        me_pct = 100.0 * med_me / med_total
        overheads[action] = ActionOverhead(
            fe_master_pct=fe_pct, master_edge_pct=me_pct, overall_pct=fe_pct + me_pct
        )
    return OverheadReport(breakdowns=breakdowns, overheads=overheads, rows=rows)


@dataclass
class ScaleRow:
    index: int
    container_id: str
    overhead_ms: float
    total_ms: float


@dataclass
class ScaleReport:
    n: int
    rows: list[ScaleRow]
    median_overhead_ms: float
    max_overhead_ms: float
    running_records: int
    live_handles_after_terminate: int
    passed: bool

    def to_doc(self) -> dict:
        return {
            "type": "scaleReport",
            "n": self.n,
            "medianOverheadMs": round(self.median_overhead_ms, 3),
            "maxOverheadMs": round(self.max_overhead_ms, 3),
            "runningRecords": self.running_records,
            "liveHandlesAfterTerminate": self.live_handles_after_terminate,
            "passed": self.passed,
        }

    def render(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"launched {self.n} containers: {self.running_records} running; "
            f"per-launch overhead median {self.median_overhead_ms:.1f}ms, "
            f"max {self.max_overhead_ms:.1f}ms (limit 2x median); "
            f"{self.live_handles_after_terminate} live handles after terminate -> {verdict}"
        )


def scalability_run(
    n_containers: int,
    delays: RuntimeDelays,
    *,
    link_delays: dict[Action, tuple[float, float]] | None = None,
    transport: str = "tcp",
    script: MockScript | None = None,
) -> ScaleReport:
    """Launch ``n_containers`` on one agent and check the overhead stays flat."""
    if not (1 <= n_containers <= 50):
        raise ConfigError("scalability runs cover 1..50 containers")
    if link_delays is None:
        link_delays = {action: SCALE_LINK_MS for action in Action}

    with BenchStack(delays=delays, link_delays=link_delays, transport=transport,
                    script=script) as stack:
        rows: list[ScaleRow] = []
        with _gc_paused():
            for index in range(1, n_containers + 1):
                cid = f"scale-{index}"
                req = ServiceRequest(
                    request_id=uuid.uuid4().hex,
                    con_type=ContainerKind.OS,
                    node_id=stack.node_id,
                    action=Action.LAUNCH,
                    container_id=cid,
                )
                try:
                    response, t0, t6 = stack.submit(req)
                except EaasError as exc:
                    raise LaunchFailure(
                        f"launch failed at container {index} ({cid}): {exc}",
                        index=index,
                        container_id=cid,
                    ) from exc
                _, _, op, total = _decompose(response, t0, t6)
                rows.append(ScaleRow(index=index, container_id=cid,
                                     overhead_ms=total - op, total_ms=total))

        running = len(stack.containers(state=ContainerState.RUNNING))

        for row in rows:
            stack.submit(
                ServiceRequest(
                    request_id=uuid.uuid4().hex,
                    con_type=ContainerKind.OS,
                    node_id=stack.node_id,
                    action=Action.TERMINATE,
                    container_id=row.container_id,
                )
            )
        live_after = len(stack.backend.live_handles())

    overheads = [row.overhead_ms for row in rows]
    median = statistics.median(overheads)
    worst = max(overheads)
    passed = worst <= 2 * median and running == n_containers and live_after == 0
    return ScaleReport(
        n=n_containers,
        rows=rows,
        median_overhead_ms=median,
        max_overhead_ms=worst,
        running_records=running,
        live_handles_after_terminate=live_after,
        passed=passed,
    )


# --- synthetic cloud-vs-edge comparison ---------------------------------------------


@dataclass
class TrafficReport:
    horizon_s: float
    n_users: int
    bytes_device_edge: int
    bytes_edge_cloud: int
    bytes_device_cloud_baseline: int
    reduction_pct: float


@dataclass
class CompareReport:
    n_users: int
    cloud_rtt_ms: float
    edge_rtt_ms: float
    horizon_s: float
    req_rate_per_user: float
    sync_period_s: float
    seed: int
    requests: int
    mean_latency_cloud_ms: float
    mean_latency_edge_ms: float
    latency_reduction_pct: float
    traffic: TrafficReport

    def to_doc(self) -> dict:
        return {
            "type": "compareReport",
            "nUsers": self.n_users,
            "cloudRttMs": self.cloud_rtt_ms,
            "edgeRttMs": self.edge_rtt_ms,
            "horizonS": self.horizon_s,
            "reqRatePerUser": self.req_rate_per_user,
            "syncPeriodS": self.sync_period_s,
            "seed": self.seed,
            "requests": self.requests,
            "meanLatencyCloudMs": round(self.mean_latency_cloud_ms, 6),
            "meanLatencyEdgeMs": round(self.mean_latency_edge_ms, 6),
            "latencyReductionPct": round(self.latency_reduction_pct, 6),
            "bytesDeviceEdge": self.traffic.bytes_device_edge,
            "bytesEdgeCloud": self.traffic.bytes_edge_cloud,
            "bytesDeviceCloudBaseline": self.traffic.bytes_device_cloud_baseline,
            "trafficReductionPct": round(self.traffic.reduction_pct, 6),
        }

    def render(self) -> str:
        return "\n".join(
            [
                f"users={self.n_users} rate={self.req_rate_per_user}/s "
                f"horizon={self.horizon_s}s requests={self.requests}",
                f"mean latency: cloud-only {self.mean_latency_cloud_ms:.2f}ms, "
                f"with edge {self.mean_latency_edge_ms:.2f}ms "
                f"(reduction {self.latency_reduction_pct:.1f}%)",
                f"traffic: device->edge {self.traffic.bytes_device_edge}B, "
                f"edge->cloud {self.traffic.bytes_edge_cloud}B, "
                f"cloud-only baseline {self.traffic.bytes_device_cloud_baseline}B "
                f"(reduction {self.traffic.reduction_pct:.1f}%)",
            ]
        )


class _Link:
    """Byte counters kept at both ends of a link (conservation is asserted)."""

    def __init__(self):
        self.sent = 0
        self.received = 0

    def transfer(self, n: int) -> None:
        self.sent += n
        self.received += n

    def total(self) -> int:
        assert self.sent == self.received, "link byte counters diverged"
        return self.sent


def _request_stream(
    n_users: int, req_rate_per_user: float, horizon_s: float, rng: random.Random
) -> list[tuple[float, float]]:
    """Seeded open-loop arrivals: (arrival_ms, service_ms) sorted by arrival."""
    period_ms = 1000.0 / req_rate_per_user
    horizon_ms = horizon_s * 1000.0
    stream = []
    for _ in range(n_users):
        t = rng.uniform(0.0, period_ms)
        while t < horizon_ms:
            stream.append((t, rng.uniform(*SERVICE_MS_RANGE)))
            t += period_ms
    stream.sort(key=lambda item: item[0])
    return stream


def _run_topology(
    stream: list[tuple[float, float]], rtt_ms: float, horizon_s: float
) -> tuple[float, _Link]:
    """Single-server queue fed by the stream; returns (mean latency, link)."""
    horizon_ms = horizon_s * 1000.0
    link = _Link()
    server_free = 0.0
    total_latency = 0.0
    for arrival, service in stream:
        link.transfer(REQUEST_BYTES)
        start = max(arrival, server_free)
        server_free = start + service
        total_latency += rtt_ms + (server_free - arrival)
        link.transfer(RESPONSE_BYTES)
    backlog_ms = max(0.0, server_free - horizon_ms)
    if backlog_ms > horizon_ms:
        raise Overload(
            f"request backlog ({backlog_ms / 1000.0:.1f}s) exceeds the horizon "
            f"({horizon_s:.1f}s)"
        )
    return (total_latency / len(stream) if stream else 0.0), link


def latency_compare(
    n_users: int,
    cloud_rtt_ms: float,
    edge_rtt_ms: float,
    horizon_s: float,
    req_rate_per_user: float,
    *,
    sync_period_s: float = 30.0,
    seed: int = 0,
) -> CompareReport:
    """Replay one seeded request stream against both topologies.

    Cloud-only: every request crosses the device<->cloud link.  With an edge
    node: requests terminate at the edge and only periodic global-view syncs
    cross edge->cloud.  Identical streams make the latency comparison exact.
    """
    if not (1 <= n_users <= MAX_USERS):
        raise ConfigError(f"user pool must be 1..{MAX_USERS}")
    if req_rate_per_user <= 0 or horizon_s <= 0 or sync_period_s <= 0:
        raise ConfigError("rate, horizon and sync period must be positive")

    rng = random.Random(seed)
    stream = _request_stream(n_users, req_rate_per_user, horizon_s, rng)
    if not stream:
        raise ConfigError("horizon too short: no requests generated")

    mean_cloud, device_cloud = _run_topology(stream, cloud_rtt_ms, horizon_s)
    mean_edge, device_edge = _run_topology(stream, edge_rtt_ms, horizon_s)

    edge_cloud = _Link()
    n_syncs = math.floor(horizon_s / sync_period_s)
    for _ in range(n_syncs):
        edge_cloud.transfer(SYNC_BASE_BYTES + SYNC_PER_USER_BYTES * n_users)

    baseline = device_cloud.total()
    reduction = 100.0 * (1.0 - edge_cloud.total() / baseline) if baseline else 0.0
    latency_reduction = (
        100.0 * (1.0 - mean_edge / mean_cloud) if mean_cloud > 0 else 0.0
    )
    return CompareReport(
        n_users=n_users,
        cloud_rtt_ms=cloud_rtt_ms,
        edge_rtt_ms=edge_rtt_ms,
        horizon_s=horizon_s,
        req_rate_per_user=req_rate_per_user,
        sync_period_s=sync_period_s,
        seed=seed,
        requests=len(stream),
        mean_latency_cloud_ms=mean_cloud,
        mean_latency_edge_ms=mean_edge,
        latency_reduction_pct=latency_reduction,
        traffic=TrafficReport(
            horizon_s=horizon_s,
            n_users=n_users,
            bytes_device_edge=device_edge.total(),
            bytes_edge_cloud=edge_cloud.total(),
            bytes_device_cloud_baseline=baseline,
            reduction_pct=reduction,
        ),
    )
